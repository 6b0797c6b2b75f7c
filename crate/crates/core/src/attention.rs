//! Masked multi-view attention: context queries see only context keys,
//! target queries see every key.
//!
//! Disallowed keys are dropped before the softmax rather than pushed to
//! negative infinity, so context outputs cannot depend on target tokens
//! even through rounding.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewKind {
    Context,
    Target,
}

/// Tokens of one view: a camera token followed by image tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewTokens {
    pub kind: ViewKind,
    pub camera: Vec<f64>,
    pub image: Vec<Vec<f64>>,
}

/// All views' tokens, concatenated view by view.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet {
    channels: usize,
    tokens_per_view: usize,
    kinds: Vec<ViewKind>,
    /// Row-major, one row of `channels` values per token.
    rows: Vec<f64>,
}

impl TokenSet {
    pub fn new(views: &[ViewTokens]) -> Result<Self> {
        let first = views
            .first()
            .ok_or_else(|| Error::Argument("token set needs at least one view".into()))?;
        let channels = first.camera.len();
        let image_tokens = first.image.len();
        if channels == 0 {
            return Err(Error::Argument("tokens need at least one channel".into()));
        }
        if !views.iter().any(|v| v.kind == ViewKind::Context) {
            return Err(Error::Argument("token set has no context view".into()));
        }
        let mut rows = Vec::with_capacity(views.len() * (image_tokens + 1) * channels);
        for (v, view) in views.iter().enumerate() {
            if view.image.len() != image_tokens {
                return Err(Error::Argument(format!(
                    "view {v} has {} image tokens, expected {image_tokens}",
                    view.image.len()
                )));
            }
            for row in std::iter::once(&view.camera).chain(&view.image) {
                if row.len() != channels {
                    return Err(Error::Argument(format!(
                        "view {v} has a token of width {}, expected {channels}",
                        row.len()
                    )));
                }
                if !row.iter().all(|x| x.is_finite()) {
                    return Err(Error::Argument(format!("view {v} has a non-finite token")));
                }
                rows.extend_from_slice(row);
            }
        }
        Ok(Self {
            channels,
            tokens_per_view: image_tokens + 1,
            kinds: views.iter().map(|v| v.kind).collect(),
            rows,
        })
    }

    /// Random tokens in [-1, 1) for the given view layout.
    pub fn random(kinds: &[ViewKind], image_tokens: usize, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        let row = |rng: &mut dyn rand::RngCore| -> Vec<f64> {
            (0..channels).map(|_| rng.random_range(-1.0..1.0)).collect()
        };
        let views: Vec<ViewTokens> = kinds
            .iter()
            .map(|&kind| ViewTokens {
                kind,
                camera: row(rng),
                image: (0..image_tokens).map(|_| row(rng)).collect(),
            })
            .collect();
        Self::new(&views)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn tokens_per_view(&self) -> usize {
        self.tokens_per_view
    }

    pub fn kinds(&self) -> &[ViewKind] {
        &self.kinds
    }

    pub fn num_views(&self) -> usize {
        self.kinds.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.kinds.len() * self.tokens_per_view
    }

    pub fn token(&self, t: usize) -> &[f64] {
        &self.rows[t * self.channels..(t + 1) * self.channels]
    }

    pub fn token_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.rows[t * self.channels..(t + 1) * self.channels]
    }

    /// Token rows of view `v`, camera token first.
    pub fn view(&self, v: usize) -> &[f64] {
        let n = self.tokens_per_view * self.channels;
        &self.rows[v * n..(v + 1) * n]
    }

    pub fn view_mut(&mut self, v: usize) -> &mut [f64] {
        let n = self.tokens_per_view * self.channels;
        &mut self.rows[v * n..(v + 1) * n]
    }

    /// Reorders views; `order[i]` is the source view of output view `i`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.num_views()];
        for &o in order {
            if o >= seen.len() || std::mem::replace(&mut seen[o], true) {
                return Err(Error::Argument("not a permutation of the views".into()));
            }
        }
        if order.len() != seen.len() {
            return Err(Error::Argument("not a permutation of the views".into()));
        }
        Ok(Self {
            channels: self.channels,
            tokens_per_view: self.tokens_per_view,
            kinds: order.iter().map(|&o| self.kinds[o]).collect(),
            rows: order.iter().flat_map(|&o| self.view(o).iter().copied()).collect(),
        })
    }
}

/// Query-by-key boolean matrix; `true` means attention is allowed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    size: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn allowed(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.size + key]
    }

    pub fn set(&mut self, query: usize, key: usize, value: bool) {
        self.allowed[query * self.size + key] = value;
    }

    /// Binary PGM: white where attention is allowed.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut out = format!("P5\n{} {}\n255\n", self.size, self.size).into_bytes();
        out.extend(self.allowed.iter().map(|&a| if a { 255u8 } else { 0 }));
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }
}

/// Context queries may read context keys only; target queries read all keys.
pub fn build_attention_mask(kinds: &[ViewKind], tokens_per_view: usize) -> Result<AttentionMask> {
    if !kinds.contains(&ViewKind::Context) {
        return Err(Error::Argument("attention mask needs at least one context view".into()));
    }
    if tokens_per_view == 0 {
        return Err(Error::Argument("each view needs at least one token".into()));
    }
    let size = kinds.len() * tokens_per_view;
    let kind_of = |t: usize| kinds[t / tokens_per_view];
    let mut allowed = Vec::with_capacity(size * size);
    for q in 0..size {
        for k in 0..size {
            allowed.push(kind_of(q) == ViewKind::Target || kind_of(k) == ViewKind::Context);
        }
    }
    Ok(AttentionMask { size, allowed })
}

/// Fixed projection weights of one attention layer, `channels x channels`
/// row-major, applied as `row * W`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionWeights {
    pub channels: usize,
    pub heads: usize,
    pub query: Vec<f64>,
    pub key: Vec<f64>,
    pub value: Vec<f64>,
}

impl AttentionWeights {
    /// Entries drawn uniformly from `[-1, 1) / sqrt(channels)`.
    pub fn random(channels: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::Argument(format!("{channels} channels do not split into {heads} heads")));
        }
        let s = 1.0 / (channels as f64).sqrt();
        let mut m = || -> Vec<f64> {
            (0..channels * channels).map(|_| rng.random_range(-1.0..1.0) * s).collect()
        };
        Ok(Self {
            channels,
            heads,
            query: m(),
            key: m(),
            value: m(),
        })
    }

    fn validate(&self, channels: usize) -> Result<()> {
        let n = channels * channels;
        if self.channels != channels
            || self.query.len() != n
            || self.key.len() != n
            || self.value.len() != n
            || self.heads == 0
            || channels % self.heads != 0
        {
            return Err(Error::Argument(format!(
                "attention weights do not fit {channels}-channel tokens"
            )));
        }
        Ok(())
    }
}

fn project_rows(rows: &[f64], channels: usize, w: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows.len()];
    for (src, dst) in rows.chunks_exact(channels).zip(out.chunks_exact_mut(channels)) {
        for (i, &x) in src.iter().enumerate() {
            let wrow = &w[i * channels..(i + 1) * channels];
            for (d, &wv) in dst.iter_mut().zip(wrow) {
                *d += x * wv;
            }
        }
    }
    out
}

fn attention_layer(tokens: &TokenSet, mask: &AttentionMask, w: &AttentionWeights) -> Result<Vec<f64>> {
    let c = tokens.channels;
    let n = tokens.num_tokens();
    let q = project_rows(&tokens.rows, c, &w.query);
    let k = project_rows(&tokens.rows, c, &w.key);
    let v = project_rows(&tokens.rows, c, &w.value);
    let hd = c / w.heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = vec![0.0; n * c];
    let mut keys = Vec::with_capacity(n);
    let mut scores = Vec::with_capacity(n);
    for qi in 0..n {
        keys.clear();
        keys.extend((0..n).filter(|&ki| mask.allowed(qi, ki)));
        if keys.is_empty() {
            return Err(Error::Argument(format!("query token {qi} has no allowed key")));
        }
        for h in 0..w.heads {
            let span = h * hd..(h + 1) * hd;
            let qrow = &q[qi * c..][span.clone()];
            scores.clear();
            scores.extend(keys.iter().map(|&ki| {
                let krow = &k[ki * c..][span.clone()];
                qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * scale
            }));
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                z += *s;
            }
            let dst = &mut out[qi * c..][span.clone()];
            for (&ki, &s) in keys.iter().zip(&scores) {
                let vrow = &v[ki * c..][span.clone()];
                let p = s / z;
                for (d, &x) in dst.iter_mut().zip(vrow) {
                    *d += p * x;
                }
            }
        }
    }
    Ok(out)
}

/// Applies the given layers in sequence. No residual path, no normalization.
pub fn masked_multiview_attention(
    tokens: &TokenSet,
    mask: &AttentionMask,
    layers: &[AttentionWeights],
) -> Result<TokenSet> {
    if mask.size != tokens.num_tokens() {
        return Err(Error::Argument(format!(
            "mask covers {} tokens but the set has {}",
            mask.size,
            tokens.num_tokens()
        )));
    }
    let mut cur = tokens.clone();
    for w in layers {
        w.validate(tokens.channels)?;
        cur.rows = attention_layer(&cur, mask, w)?;
    }
    Ok(cur)
}
