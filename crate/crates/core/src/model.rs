//! The full network and its training step: backbone, label graph, attention,
//! classifier, and (during training) object erasing with the dual loss.

use ndarray::{Array1, Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, ConvBackbone, FeatureExtractor, FeatureMap, ImageTensor};
use crate::car::{Ablation, CarParameters, CarTrace};
use crate::data::{LabelVocabulary, WordVectors};
use crate::erasing::{locate_region, record_invocation, select_categories, ErasureConfig, ErasureRegion};
use crate::graph::{init_graph, ContextEmbeddingTable, GraphConfig, GraphState, GraphTrace};
use crate::heads::{bce_logit, ClassifierParameters, LabelVector, LossReport, ScoreVector};
use crate::nn::{prefixed, sigmoid, Parameters};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SrdlModel {
    pub graph: GraphState,
    pub backbone: ConvBackbone,
    pub car: CarParameters,
    pub classifier: ClassifierParameters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub graph: GraphConfig,
    pub ablation: Ablation,
}

/// What object erasing did for one image.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ErasureLog {
    /// Selected categories, best first, with their region or `None` when skipped.
    pub selected: Vec<(usize, Option<ErasureRegion>)>,
}

/// Gradients of the attention/classifier head for one image.
#[derive(Debug, Clone)]
pub struct HeadGrads {
    pub car: CarParameters,
    pub classifier: ClassifierParameters,
    pub embeddings: Array2<f64>,
    pub feature_map: Array3<f64>,
}

#[derive(Debug, Clone)]
pub struct HeadStep {
    pub loss: LossReport,
    pub scores: ScoreVector,
    pub erased_scores: ScoreVector,
    pub erasure: Option<ErasureLog>,
    pub grads: HeadGrads,
}

struct ErasedBranch {
    mask: Array1<f64>,
    rep: Array1<f64>,
    argmax: Vec<usize>,
    logit: f64,
}

/// Loss and gradients of everything downstream of the feature map.
///
/// `grad_scale` multiplies every gradient (e.g. `1 / batch`); the loss itself
/// is the per-image mean over categories. With `erasure` absent or disabled
/// the erased scores equal the original ones.
#[allow(clippy::too_many_arguments)]
pub fn attention_step(
    fm: &FeatureMap,
    embeddings: &ContextEmbeddingTable,
    car: &CarParameters,
    classifier: &ClassifierParameters,
    labels: &LabelVector,
    ablation: Ablation,
    erasure: Option<&ErasureConfig>,
    grad_scale: f64,
) -> Result<HeadStep> {
    let c_count = classifier.categories();
    if embeddings.categories() != c_count || labels.0.len() != c_count {
        return Err(Error::shape(
            "categories",
            c_count,
            format!("{} embeddings / {} labels", embeddings.categories(), labels.0.len()),
        ));
    }
    let trace = CarTrace::forward(fm, embeddings, car, ablation)?;
    let pooled: Vec<(Array1<f64>, Vec<usize>)> = (0..c_count).map(|c| trace.pool(fm, c, None)).collect();
    let logits: Array1<f64> = pooled
        .iter()
        .enumerate()
        .map(|(c, (rep, _))| classifier.logit(c, rep.view()))
        .collect();
    let scores = logits.mapv(sigmoid);

    let mut branches: Vec<Option<ErasedBranch>> = (0..c_count).map(|_| None).collect();
    let erasure = erasure.filter(|e| e.enabled);
    let log = erasure.map(|cfg| {
        record_invocation();
        let mut log = ErasureLog::default();
        for c in select_categories(scores.view(), cfg.topk) {
            let sa = trace.spatial_matrix(fm, c);
            match locate_region(sa.view(), cfg.alpha) {
                Ok(region) => {
                    let mask = region.keep_mask(fm.width(), fm.height());
                    let erased = trace.spatial(c) * &mask;
                    let (rep, argmax) = trace.pool(fm, c, Some(&erased));
                    let logit = classifier.logit(c, rep.view());
                    branches[c] = Some(ErasedBranch {
                        mask,
                        rep,
                        argmax,
                        logit,
                    });
                    log.selected.push((c, Some(region)));
                }
                Err(_) => log.selected.push((c, None)),
            }
        }
        log
    });
    let erased_logits: Array1<f64> = (0..c_count)
        .map(|c| branches[c].as_ref().map_or(logits[c], |b| b.logit))
        .collect();

    let per_c = c_count as f64;
    let mut l_ori = 0.0;
    let mut l_era = 0.0;
    let mut grad_ori = Array1::zeros(c_count);
    let mut grad_era = Array1::zeros(c_count);
    for c in 0..c_count {
        let (l, g) = bce_logit(logits[c], labels.0[c]);
        l_ori += l;
        grad_ori[c] = g * grad_scale / per_c;
        let (l, g) = bce_logit(erased_logits[c], labels.0[c]);
        l_era += l;
        grad_era[c] = g * grad_scale / per_c;
    }
    let loss = LossReport::new(l_ori / per_c, l_era / per_c);

    let mut grads = HeadGrads {
        car: car.zeros_like(),
        classifier: classifier.zeros_like(),
        embeddings: Array2::zeros((0, 0)),
        feature_map: Array3::zeros((0, 0, 0)),
    };
    let mut grad_positions = Array2::zeros((fm.positions(), fm.channels()));
    let mut attention = trace.zero_grads();
    for c in 0..c_count {
        let mut g_direct = grad_ori[c];
        match &branches[c] {
            Some(b) => {
                let d_rep = classifier.logit_backward(c, b.rep.view(), grad_era[c], &mut grads.classifier);
                trace.pool_backward(fm, c, Some(&b.mask), &b.argmax, d_rep.view(), &mut grad_positions, &mut attention);
            }
            None => g_direct += grad_era[c],
        }
        let (rep, argmax) = &pooled[c];
        let d_rep = classifier.logit_backward(c, rep.view(), g_direct, &mut grads.classifier);
        trace.pool_backward(fm, c, None, argmax, d_rep.view(), &mut grad_positions, &mut attention);
    }
    grads.embeddings = trace.backward(fm, car, &attention, &mut grad_positions, &mut grads.car);
    grads.feature_map = grad_positions
        .into_shape_with_order((fm.width(), fm.height(), fm.channels()))
        .expect("positions x channels");

    Ok(HeadStep {
        loss,
        scores: ScoreVector(scores),
        erased_scores: ScoreVector(erased_logits.mapv(sigmoid)),
        erasure: log,
        grads,
    })
}

/// Result of one optimisation step's forward/backward over a batch.
#[derive(Debug, Clone)]
pub struct BatchStep {
    /// Batch means of the per-image losses.
    pub loss: LossReport,
    pub grads: SrdlModel,
    pub scores: Vec<ScoreVector>,
    pub erasure: Vec<Option<ErasureLog>>,
}

/// Inference output for one image.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub scores: ScoreVector,
    /// Spatial attention per category, indexed `[x, y]`.
    pub spatial: Vec<Array2<f64>>,
}

impl SrdlModel {
    pub fn init(
        vocab: &LabelVocabulary,
        words: &WordVectors,
        config: &ModelConfig,
        seed: u64,
    ) -> Result<Self> {
        let graph = init_graph(vocab, words, &config.graph, seed)?;
        let backbone = ConvBackbone::init(&config.backbone, seed.wrapping_add(1));
        let d = backbone.channels();
        let car = CarParameters::init(d, graph.dim(), seed.wrapping_add(2));
        let classifier = ClassifierParameters::init(vocab.len(), d, seed.wrapping_add(3));
        Ok(SrdlModel {
            graph,
            backbone,
            car,
            classifier,
        })
    }

    pub fn zeros_like(&self) -> Self {
        SrdlModel {
            graph: self.graph.zeros_like(),
            backbone: self.backbone.zeros_like(),
            car: self.car.zeros_like(),
            classifier: self.classifier.zeros_like(),
        }
    }

    pub fn categories(&self) -> usize {
        self.classifier.categories()
    }

    /// Category embeddings fed to the attention: graph outputs, or the raw
    /// word vectors under the `no_gcn` ablation.
    pub fn embeddings(&self, ablation: Ablation) -> Result<(ContextEmbeddingTable, Option<GraphTrace>)> {
        if ablation.no_gcn {
            Ok((ContextEmbeddingTable(self.graph.nodes.clone()), None))
        } else {
            let trace = self.graph.forward_traced()?;
            Ok((trace.output(), Some(trace)))
        }
    }

    pub fn predict(&self, image: &ImageTensor, embeddings: &ContextEmbeddingTable, ablation: Ablation) -> Result<Prediction> {
        let fm = self.backbone.extract(image)?;
        let trace = CarTrace::forward(&fm, embeddings, &self.car, ablation)?;
        let scores = (0..self.categories())
            .map(|c| sigmoid(self.classifier.logit(c, trace.pool(&fm, c, None).0.view())))
            .collect();
        Ok(Prediction {
            scores: ScoreVector(scores),
            spatial: (0..self.categories()).map(|c| trace.spatial_matrix(&fm, c)).collect(),
        })
    }

    pub fn train_batch(
        &self,
        batch: &[(ImageTensor, LabelVector)],
        ablation: Ablation,
        erasure: Option<&ErasureConfig>,
    ) -> Result<BatchStep> {
        if batch.is_empty() {
            return Err(Error::Config("empty training batch".into()));
        }
        let (embeddings, graph_trace) = self.embeddings(ablation)?;
        let scale = 1.0 / batch.len() as f64;
        let per_image: Vec<Result<(HeadStep, ConvBackbone)>> = batch
            .par_iter()
            .map(|(image, labels)| {
                let (fm, bb_trace) = self.backbone.forward_traced(image)?;
                let step = attention_step(&fm, &embeddings, &self.car, &self.classifier, labels, ablation, erasure, scale)?;
                let mut bb_grads = self.backbone.zeros_like();
                self.backbone.backward(&bb_trace, &step.grads.feature_map, &mut bb_grads);
                Ok((step, bb_grads))
            })
            .collect();

        let mut grads = self.zeros_like();
        let mut grad_embeddings = Array2::zeros(embeddings.0.raw_dim());
        let (mut l_ori, mut l_era) = (0.0, 0.0);
        let mut scores = Vec::with_capacity(batch.len());
        let mut logs = Vec::with_capacity(batch.len());
        for item in per_image {
            let (step, bb) = item?;
            grads.backbone.accumulate(&bb);
            grads.car.accumulate(&step.grads.car);
            grads.classifier.accumulate(&step.grads.classifier);
            grad_embeddings += &step.grads.embeddings;
            l_ori += step.loss.l_ori;
            l_era += step.loss.l_era;
            scores.push(step.scores);
            logs.push(step.erasure);
        }
        match graph_trace {
            Some(trace) => self.graph.backward(&trace, grad_embeddings.view(), &mut grads.graph),
            None => grads.graph.nodes += &grad_embeddings,
        }
        Ok(BatchStep {
            loss: LossReport::new(l_ori * scale, l_era * scale),
            grads,
            scores,
            erasure: logs,
        })
    }
}

impl Parameters for SrdlModel {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = prefixed("graph", self.graph.tensors());
        out.extend(prefixed("backbone", self.backbone.tensors()));
        out.extend(prefixed("car", self.car.tensors()));
        out.extend(prefixed("classifier", self.classifier.tensors()));
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = prefixed("graph", self.graph.tensors_mut());
        out.extend(prefixed("backbone", self.backbone.tensors_mut()));
        out.extend(prefixed("car", self.car.tensors_mut()));
        out.extend(prefixed("classifier", self.classifier.tensors_mut()));
        out
    }
}
