//! Category-specific attentional regions.
//!
//! For every category `c` with embedding `x_c`:
//!
//! ```text
//! CA   = sigmoid(f_c(tanh(f_ca(GMP(F)) * f_w(x_c))))            length d
//! SA   = sigmoid(f_s(tanh(f_sa(F[x,y]) * f_w(x_c))))            per position
//! F^_c = 0.5 * F * SA + 0.5 * F * CA                            broadcast
//! f_c  = GMP(F^_c)
//! ```
//!
//! The five projections are shared by all categories; only `x_c` differs.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureMap;
use crate::graph::ContextEmbeddingTable;
use crate::nn::{prefixed, sigmoid, Affine, Parameters};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CarParameters {
    /// `f_ca`: pooled features, d -> d.
    pub channel_proj: Affine,
    /// `f_sa`: per-position features, d -> d.
    pub spatial_proj: Affine,
    /// `f_w`: embedding, d' -> d.
    pub embed_proj: Affine,
    /// `f_c`: d -> d.
    pub channel_out: Affine,
    /// `f_s`: d -> 1.
    pub spatial_out: Affine,
}

impl CarParameters {
    pub fn init(feature_dim: usize, embed_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        CarParameters {
            channel_proj: Affine::init(feature_dim, feature_dim, &mut rng),
            spatial_proj: Affine::init(feature_dim, feature_dim, &mut rng),
            embed_proj: Affine::init(embed_dim, feature_dim, &mut rng),
            channel_out: Affine::init(feature_dim, feature_dim, &mut rng),
            spatial_out: Affine::init(feature_dim, 1, &mut rng),
        }
    }

    pub fn zeros(feature_dim: usize, embed_dim: usize) -> Self {
        CarParameters {
            channel_proj: Affine::zeros(feature_dim, feature_dim),
            spatial_proj: Affine::zeros(feature_dim, feature_dim),
            embed_proj: Affine::zeros(embed_dim, feature_dim),
            channel_out: Affine::zeros(feature_dim, feature_dim),
            spatial_out: Affine::zeros(feature_dim, 1),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.channel_proj.output_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_proj.input_dim()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.feature_dim(), self.embed_dim())
    }

    fn check(&self, features: usize, embed: usize) -> Result<()> {
        let d = self.feature_dim();
        if features != d {
            return Err(Error::shape("feature channels", d, features));
        }
        self.channel_proj.check("f_ca", d, d)?;
        self.spatial_proj.check("f_sa", d, d)?;
        self.embed_proj.check("f_w", embed, d)?;
        self.channel_out.check("f_c", d, d)?;
        self.spatial_out.check("f_s", d, 1)
    }
}

impl Parameters for CarParameters {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = prefixed("f_ca", self.channel_proj.tensors());
        out.extend(prefixed("f_sa", self.spatial_proj.tensors()));
        out.extend(prefixed("f_w", self.embed_proj.tensors()));
        out.extend(prefixed("f_c", self.channel_out.tensors()));
        out.extend(prefixed("f_s", self.spatial_out.tensors()));
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = prefixed("f_ca", self.channel_proj.tensors_mut());
        out.extend(prefixed("f_sa", self.spatial_proj.tensors_mut()));
        out.extend(prefixed("f_w", self.embed_proj.tensors_mut()));
        out.extend(prefixed("f_c", self.channel_out.tensors_mut()));
        out.extend(prefixed("f_s", self.spatial_out.tensors_mut()));
        out
    }
}

/// Channel vector (length d) and spatial matrix (`[x, y]`), entries in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionPair {
    pub channel: Array1<f64>,
    pub spatial: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryRepresentation(pub Array1<f64>);

/// Ablation switches. `no_gcn` is honoured by the caller, which passes raw
/// word vectors instead of graph outputs; the attention code only sees
/// whatever embeddings it is handed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Ablation {
    pub no_gcn: bool,
    pub no_ca: bool,
    pub no_sa: bool,
}

impl Ablation {
    pub fn parse<S: AsRef<str>>(flags: &[S]) -> Result<Self> {
        let mut out = Ablation::default();
        for flag in flags {
            match flag.as_ref() {
                "no-gcn" => out.no_gcn = true,
                "no-ca" => out.no_ca = true,
                "no-sa" => out.no_sa = true,
                other => return Err(Error::UnknownAblation(other.to_owned())),
            }
        }
        Ok(out)
    }

    pub fn flags(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.no_gcn {
            out.push("no-gcn".to_owned());
        }
        if self.no_ca {
            out.push("no-ca".to_owned());
        }
        if self.no_sa {
            out.push("no-sa".to_owned());
        }
        out
    }
}

/// Per-channel maximum over positions, with the first position attaining it.
fn global_max_pool(positions: ArrayView2<f64>) -> (Array1<f64>, Vec<usize>) {
    let d = positions.ncols();
    let mut best = Array1::from_elem(d, f64::NEG_INFINITY);
    let mut at = vec![0; d];
    for (p, row) in positions.outer_iter().enumerate() {
        for k in 0..d {
            if row[k] > best[k] {
                best[k] = row[k];
                at[k] = p;
            }
        }
    }
    (best, at)
}

pub fn channel_attention(
    fm: &FeatureMap,
    embedding: ArrayView1<f64>,
    params: &CarParameters,
) -> Result<Array1<f64>> {
    params.check(fm.channels(), embedding.len())?;
    let (pooled, _) = global_max_pool(fm.as_positions());
    let pooled_proj = params.channel_proj.forward(pooled.view());
    let embed = params.embed_proj.forward(embedding);
    let inner = (&pooled_proj * &embed).mapv(f64::tanh);
    Ok(params.channel_out.forward(inner.view()).mapv(sigmoid))
}

pub fn spatial_attention(
    fm: &FeatureMap,
    embedding: ArrayView1<f64>,
    params: &CarParameters,
) -> Result<Array2<f64>> {
    params.check(fm.channels(), embedding.len())?;
    let proj = params.spatial_proj.forward_rows(fm.as_positions());
    let embed = params.embed_proj.forward(embedding);
    let inner = (proj * &embed).mapv(f64::tanh);
    let scores = params.spatial_out.forward_rows(inner.view()).mapv(sigmoid);
    Ok(scores
        .into_shape_with_order((fm.width(), fm.height()))
        .expect("one score per position"))
}

/// `F^[x,y,k] = 0.5 F[x,y,k] SA[x,y] + 0.5 F[x,y,k] CA[k]`.
pub fn fuse(fm: &FeatureMap, pair: &AttentionPair) -> Result<FeatureMap> {
    let (w, h, d) = fm.0.dim();
    if pair.channel.len() != d {
        return Err(Error::shape("channel attention", d, pair.channel.len()));
    }
    if pair.spatial.dim() != (w, h) {
        return Err(Error::shape(
            "spatial attention",
            format!("{w}x{h}"),
            format!("{:?}", pair.spatial.dim()),
        ));
    }
    let sa = pair.spatial.view().insert_axis(Axis(2));
    let ca = pair.channel.view();
    let fused = &fm.0 * &(&sa * 0.5 + &(&ca * 0.5));
    Ok(FeatureMap(fused))
}

pub fn pool_representation(fm: &FeatureMap) -> CategoryRepresentation {
    CategoryRepresentation(global_max_pool(fm.as_positions()).0)
}

/// Runs attention, fusion and pooling for every category.
pub fn car_forward(
    fm: &FeatureMap,
    embeddings: &ContextEmbeddingTable,
    params: &CarParameters,
    ablation: Ablation,
) -> Result<(Vec<AttentionPair>, Vec<CategoryRepresentation>)> {
    let trace = CarTrace::forward(fm, embeddings, params, ablation)?;
    let reps = (0..trace.categories())
        .map(|c| CategoryRepresentation(trace.pool(fm, c, None).0))
        .collect();
    Ok((trace.pairs(fm), reps))
}

/// Everything the backward pass needs from one image's attention forward.
#[derive(Debug, Clone)]
pub struct CarTrace {
    ablation: Ablation,
    embeddings: Array2<f64>,
    pooled: Array1<f64>,
    pooled_at: Vec<usize>,
    channel_pre: Array1<f64>,
    spatial_pre: Array2<f64>,
    categories: Vec<CategoryTrace>,
}

#[derive(Debug, Clone)]
struct CategoryTrace {
    embed: Array1<f64>,
    channel_inner: Array1<f64>,
    channel: Array1<f64>,
    spatial_inner: Array2<f64>,
    spatial: Array1<f64>,
}

/// Gradients flowing into the attention maps of every category, filled by
/// [`CarTrace::pool_backward`] and consumed by [`CarTrace::backward`].
#[derive(Debug, Clone)]
pub struct AttentionGrads {
    pub channel: Vec<Array1<f64>>,
    pub spatial: Vec<Array1<f64>>,
}

impl CarTrace {
    pub fn forward(
        fm: &FeatureMap,
        embeddings: &ContextEmbeddingTable,
        params: &CarParameters,
        ablation: Ablation,
    ) -> Result<Self> {
        params.check(fm.channels(), embeddings.dim())?;
        let positions = fm.as_positions();
        let (pooled, pooled_at) = global_max_pool(positions);
        let channel_pre = params.channel_proj.forward(pooled.view());
        let spatial_pre = params.spatial_proj.forward_rows(positions);
        let p = fm.positions();
        let d = fm.channels();
        let categories = embeddings
            .0
            .outer_iter()
            .map(|x| {
                let embed = params.embed_proj.forward(x);
                let (channel_inner, channel) = if ablation.no_ca {
                    (Array1::zeros(0), Array1::ones(d))
                } else {
                    let inner = (&channel_pre * &embed).mapv(f64::tanh);
                    let ca = params.channel_out.forward(inner.view()).mapv(sigmoid);
                    (inner, ca)
                };
                let (spatial_inner, spatial) = if ablation.no_sa {
                    (Array2::zeros((0, 0)), Array1::ones(p))
                } else {
                    let inner = (&spatial_pre * &embed).mapv(f64::tanh);
                    let sa = params
                        .spatial_out
                        .forward_rows(inner.view())
                        .column(0)
                        .mapv(sigmoid);
                    (inner, sa)
                };
                CategoryTrace {
                    embed,
                    channel_inner,
                    channel,
                    spatial_inner,
                    spatial,
                }
            })
            .collect();
        Ok(CarTrace {
            ablation,
            embeddings: embeddings.0.clone(),
            pooled,
            pooled_at,
            channel_pre,
            spatial_pre,
            categories,
        })
    }

    pub fn categories(&self) -> usize {
        self.categories.len()
    }

    pub fn channel(&self, c: usize) -> &Array1<f64> {
        &self.categories[c].channel
    }

    /// Spatial attention of category `c` as a flat per-position vector.
    pub fn spatial(&self, c: usize) -> &Array1<f64> {
        &self.categories[c].spatial
    }

    pub fn spatial_matrix(&self, fm: &FeatureMap, c: usize) -> Array2<f64> {
        self.categories[c]
            .spatial
            .clone()
            .into_shape_with_order((fm.width(), fm.height()))
            .expect("one score per position")
    }

    pub fn pairs(&self, fm: &FeatureMap) -> Vec<AttentionPair> {
        (0..self.categories())
            .map(|c| AttentionPair {
                channel: self.categories[c].channel.clone(),
                spatial: self.spatial_matrix(fm, c),
            })
            .collect()
    }

    /// Fuses and max-pools category `c`, optionally with a replacement
    /// spatial attention (the erased map). Returns the representation and,
    /// per channel, the position that attained the maximum.
    pub fn pool(&self, fm: &FeatureMap, c: usize, spatial: Option<&Array1<f64>>) -> (Array1<f64>, Vec<usize>) {
        let cat = &self.categories[c];
        let sa = spatial.unwrap_or(&cat.spatial);
        let ca = &cat.channel;
        let positions = fm.as_positions();
        let d = positions.ncols();
        let mut best = Array1::from_elem(d, f64::NEG_INFINITY);
        let mut at = vec![0; d];
        for (p, row) in positions.outer_iter().enumerate() {
            let half_sa = 0.5 * sa[p];
            for k in 0..d {
                let v = row[k] * (half_sa + 0.5 * ca[k]);
                if v > best[k] {
                    best[k] = v;
                    at[k] = p;
                }
            }
        }
        (best, at)
    }

    pub fn zero_grads(&self) -> AttentionGrads {
        AttentionGrads {
            channel: self
                .categories
                .iter()
                .map(|c| Array1::zeros(c.channel.len()))
                .collect(),
            spatial: self
                .categories
                .iter()
                .map(|c| Array1::zeros(c.spatial.len()))
                .collect(),
        }
    }

    /// Backward through fusion and pooling for one category. `mask`, when
    /// present, is the 0/1 erasure mask that produced the spatial map used
    /// in [`CarTrace::pool`].
    #[allow(clippy::too_many_arguments)]
    pub fn pool_backward(
        &self,
        fm: &FeatureMap,
        c: usize,
        mask: Option<&Array1<f64>>,
        argmax: &[usize],
        grad_rep: ArrayView1<f64>,
        grad_positions: &mut Array2<f64>,
        grads: &mut AttentionGrads,
    ) {
        let cat = &self.categories[c];
        let positions = fm.as_positions();
        for (k, (&p, &g)) in argmax.iter().zip(grad_rep).enumerate() {
            if g == 0.0 {
                continue;
            }
            let m = mask.map_or(1.0, |m| m[p]);
            let sa = cat.spatial[p] * m;
            let f = positions[[p, k]];
            grad_positions[[p, k]] += g * (0.5 * sa + 0.5 * cat.channel[k]);
            grads.spatial[c][p] += 0.5 * g * f * m;
            grads.channel[c][k] += 0.5 * g * f;
        }
    }

    /// Backpropagates attention-map gradients into the projections, the
    /// feature map and the embeddings. Returns `dL/d embeddings`.
    pub fn backward(
        &self,
        fm: &FeatureMap,
        params: &CarParameters,
        attention: &AttentionGrads,
        grad_positions: &mut Array2<f64>,
        grads: &mut CarParameters,
    ) -> Array2<f64> {
        let d = fm.channels();
        let mut grad_embeddings = Array2::zeros(self.embeddings.raw_dim());
        let mut grad_channel_pre = Array1::<f64>::zeros(d);
        let mut grad_spatial_pre = Array2::<f64>::zeros(self.spatial_pre.raw_dim());

        for (c, cat) in self.categories.iter().enumerate() {
            let mut grad_embed = Array1::<f64>::zeros(d);

            if !self.ablation.no_ca {
                let da = &attention.channel[c] * &cat.channel.mapv(|s| s * (1.0 - s));
                let dz = params
                    .channel_out
                    .backward(cat.channel_inner.view(), da.view(), &mut grads.channel_out);
                let dq = dz * &cat.channel_inner.mapv(|z| 1.0 - z * z);
                grad_channel_pre.scaled_add(1.0, &(&dq * &cat.embed));
                grad_embed += &(&dq * &self.channel_pre);
            }

            if !self.ablation.no_sa {
                let dr = &attention.spatial[c] * &cat.spatial.mapv(|s| s * (1.0 - s));
                let dr = dr.insert_axis(Axis(1));
                let mut dq = params.spatial_out.backward_rows(
                    cat.spatial_inner.view(),
                    dr.view(),
                    &mut grads.spatial_out,
                );
                dq.zip_mut_with(&cat.spatial_inner, |g, &z| *g *= 1.0 - z * z);
                grad_spatial_pre += &(&dq * &cat.embed);
                grad_embed += &(&dq * &self.spatial_pre).sum_axis(Axis(0));
            }

            let dx = params.embed_proj.backward(
                self.embeddings.row(c),
                grad_embed.view(),
                &mut grads.embed_proj,
            );
            grad_embeddings.row_mut(c).assign(&dx);
        }

        if !self.ablation.no_ca {
            let dg = params.channel_proj.backward(
                self.pooled.view(),
                grad_channel_pre.view(),
                &mut grads.channel_proj,
            );
            for (k, (&p, g)) in self.pooled_at.iter().zip(dg).enumerate() {
                grad_positions[[p, k]] += g;
            }
        }
        if !self.ablation.no_sa {
            *grad_positions += &params.spatial_proj.backward_rows(
                fm.as_positions(),
                grad_spatial_pre.view(),
                &mut grads.spatial_proj,
            );
        }
        grad_embeddings
    }
}
