//! RAMEN: early fusion of each region with the question, a shared residual
//! projector, late fusion, and recurrent aggregation by a bidirectional GRU.

pub mod gradcheck;
mod spatial;

pub use spatial::{encode_spatial, grid_side, BoundingBox};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{bigru_final, BatchNorm, BnMode, Embedding, GruCell, Linear, ParamStore, ResidualMlp, Session};
use crate::tensor::{Real, TensorError, Var};

/// Which of the four architecture variants a model is built as.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    NoEarlyFusion,
    NoLateFusion,
    MeanPool,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::Full,
        Ablation::NoEarlyFusion,
        Ablation::NoLateFusion,
        Ablation::MeanPool,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoEarlyFusion => "no_early_fusion",
            Ablation::NoLateFusion => "no_late_fusion",
            Ablation::MeanPool => "mean_pool",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionEncoder {
    /// Single-layer GRU, left to right.
    #[default]
    Unidirectional,
    /// Two GRUs of half width whose final states are concatenated.
    Bidirectional,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Softmax cross-entropy against a single answer index.
    #[default]
    SoftmaxCrossEntropy,
    /// Per-answer sigmoid cross-entropy against soft multi-label targets.
    BinaryCrossEntropy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RamenConfig {
    pub visual_dim: usize,
    pub spatial_dim: usize,
    pub vocab_size: usize,
    pub embedding_dim: usize,
    pub question_dim: usize,
    pub question_encoder: QuestionEncoder,
    pub projector_width: usize,
    pub aggregator_hidden: usize,
    pub pre_classifier_width: usize,
    pub num_answers: usize,
    pub ablation: Ablation,
    pub loss: LossKind,
}

impl Default for RamenConfig {
    /// Full-size dimensions. `vocab_size` and `num_answers` are dataset
    /// dependent and start at zero.
    fn default() -> Self {
        RamenConfig {
            visual_dim: 2048,
            spatial_dim: 512,
            vocab_size: 0,
            embedding_dim: 300,
            question_dim: 1024,
            question_encoder: QuestionEncoder::Unidirectional,
            projector_width: 1024,
            aggregator_hidden: 1024,
            pre_classifier_width: 2048,
            num_answers: 0,
            ablation: Ablation::Full,
            loss: LossKind::SoftmaxCrossEntropy,
        }
    }
}

impl RamenConfig {
    /// Scaled-down widths that train on a laptop CPU in minutes. The region
    /// features keep their full 2048 + 512 layout.
    pub fn desk(vocab_size: usize, num_answers: usize) -> Self {
        RamenConfig {
            vocab_size,
            num_answers,
            embedding_dim: 64,
            question_dim: 64,
            projector_width: 64,
            aggregator_hidden: 64,
            pre_classifier_width: 128,
            ..RamenConfig::default()
        }
    }

    pub fn region_dim(&self) -> usize {
        self.visual_dim + self.spatial_dim
    }

    /// Width of the projector input: region plus question under early
    /// fusion, region alone without it.
    pub fn projector_input(&self) -> usize {
        match self.ablation {
            Ablation::NoEarlyFusion => self.region_dim(),
            _ => self.region_dim() + self.question_dim,
        }
    }

    /// Width of each element fed to the aggregator.
    pub fn late_fused_dim(&self) -> usize {
        match self.ablation {
            Ablation::NoLateFusion => self.projector_width,
            _ => self.projector_width + self.question_dim,
        }
    }

    /// Width of the aggregated vector handed to the classifier head.
    pub fn aggregated_dim(&self) -> usize {
        match self.ablation {
            Ablation::MeanPool => self.late_fused_dim(),
            _ => 2 * self.aggregator_hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("visual_dim", self.visual_dim),
            ("vocab_size", self.vocab_size),
            ("embedding_dim", self.embedding_dim),
            ("question_dim", self.question_dim),
            ("projector_width", self.projector_width),
            ("aggregator_hidden", self.aggregator_hidden),
            ("pre_classifier_width", self.pre_classifier_width),
            ("num_answers", self.num_answers),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if grid_side(self.spatial_dim).is_none() {
            return Err(Error::Config(format!(
                "spatial_dim {} is not 2 * side^2 for a grid side >= 2",
                self.spatial_dim
            )));
        }
        if self.question_encoder == QuestionEncoder::Bidirectional && !self.question_dim.is_multiple_of(2) {
            return Err(Error::Config(
                "a bidirectional question encoder needs an even question_dim".into(),
            ));
        }
        if self.projector_width + self.question_dim != 2 * self.aggregator_hidden {
            return Err(Error::Config(format!(
                "projector_width + question_dim ({}) must equal 2 * aggregator_hidden ({}) so \
                 every variant feeds the same head width",
                self.projector_width + self.question_dim,
                2 * self.aggregator_hidden
            )));
        }
        Ok(())
    }

    /// Field names whose values differ between two configs.
    pub fn differing_fields(&self, other: &RamenConfig) -> Vec<String> {
        let a = serde_json::to_value(self).expect("config serializes");
        let b = serde_json::to_value(other).expect("config serializes");
        let (a, b) = (a.as_object().unwrap(), b.as_object().unwrap());
        a.iter()
            .filter(|(k, v)| b.get(*k) != Some(*v))
            .map(|(k, _)| k.clone())
            .collect()
    }
}

/// The `N` region vectors of one image, each `visual ++ spatial`.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionSet {
    pub num_regions: usize,
    pub dim: usize,
    pub values: Vec<f32>,
}

impl RegionSet {
    pub fn new(num_regions: usize, dim: usize, values: Vec<f32>) -> Result<Self> {
        if num_regions == 0 {
            return Err(Error::Data("a region set needs at least one region".into()));
        }
        if values.len() != num_regions * dim {
            return Err(Error::Data(format!(
                "{} values for {num_regions} regions of width {dim}",
                values.len()
            )));
        }
        Ok(RegionSet {
            num_regions,
            dim,
            values,
        })
    }

    pub fn region(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }
}

/// A mini-batch: `B` region sets of equal size and `B` token sequences.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    /// `[(B * N) x region_dim]`, row `b * N + i` is region `i` of item `b`.
    pub regions: Vec<T>,
    pub num_regions: usize,
    pub region_dim: usize,
    pub questions: Vec<Vec<usize>>,
}

impl<T: Real> Batch<T> {
    pub fn new(sets: &[&RegionSet], questions: Vec<Vec<usize>>) -> Result<Self> {
        let first = sets.first().ok_or_else(|| Error::Data("empty batch".into()))?;
        if sets.len() != questions.len() {
            return Err(Error::Data(format!(
                "{} region sets for {} questions",
                sets.len(),
                questions.len()
            )));
        }
        let mut regions = Vec::with_capacity(sets.len() * first.values.len());
        for s in sets {
            if s.num_regions != first.num_regions || s.dim != first.dim {
                return Err(Error::Data("all region sets in a batch need the same shape".into()));
            }
            regions.extend(s.values.iter().map(|&v| T::from_f32(v).unwrap()));
        }
        Ok(Batch {
            regions,
            num_regions: first.num_regions,
            region_dim: first.dim,
            questions,
        })
    }

    pub fn len(&self) -> usize {
        self.questions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.questions.is_empty()
    }
}

/// Training targets for one batch.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Single(Vec<usize>),
    /// Row-major `[B x num_answers]` soft labels.
    Multi(Vec<f32>),
}

/// Widths observed along the pipeline during one forward pass.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ShapeTrace {
    pub region: usize,
    pub question: usize,
    pub fused: usize,
    pub projected: usize,
    pub late_fused: usize,
    pub aggregated: usize,
    pub logits: usize,
}

#[derive(Clone, Debug)]
pub struct RamenModel<T> {
    pub config: RamenConfig,
    pub params: ParamStore<T>,
    pub embedding: Embedding,
    pub question_fwd: GruCell,
    pub question_bwd: Option<GruCell>,
    pub input_bn: BatchNorm<T>,
    pub projector: ResidualMlp,
    pub aggregator: Option<(GruCell, GruCell)>,
    pub pre_classifier: Linear,
    pub classifier: Linear,
}

fn width_check(stage: &'static str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Tensor(TensorError::ShapeMismatch {
            op: stage,
            left: vec![got],
            right: vec![want],
        }));
    }
    Ok(())
}

impl<T: Real> RamenModel<T> {
    /// Builds a freshly initialized model. Parameters only exist for the
    /// branches the configured variant uses.
    pub fn new(config: RamenConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let c = &config;
        let embedding = Embedding::new(&mut params, &mut rng, "embedding", c.vocab_size, c.embedding_dim);
        let (question_fwd, question_bwd) = match c.question_encoder {
            QuestionEncoder::Unidirectional => (
                GruCell::new(&mut params, &mut rng, "question_gru", c.embedding_dim, c.question_dim),
                None,
            ),
            QuestionEncoder::Bidirectional => {
                let h = c.question_dim / 2;
                let f = GruCell::new(&mut params, &mut rng, "question_gru.fwd", c.embedding_dim, h);
                let b = GruCell::new(&mut params, &mut rng, "question_gru.bwd", c.embedding_dim, h);
                (f, Some(b))
            }
        };
        let input_bn = BatchNorm::new(&mut params, "input_bn", c.projector_input());
        let projector = ResidualMlp::new(
            &mut params,
            &mut rng,
            "projector",
            c.projector_input(),
            c.projector_width,
        );
        let aggregator = (c.ablation != Ablation::MeanPool).then(|| {
            let f = GruCell::new(
                &mut params,
                &mut rng,
                "aggregator.fwd",
                c.late_fused_dim(),
                c.aggregator_hidden,
            );
            let b = GruCell::new(
                &mut params,
                &mut rng,
                "aggregator.bwd",
                c.late_fused_dim(),
                c.aggregator_hidden,
            );
            (f, b)
        });
        let pre_classifier = Linear::new(
            &mut params,
            &mut rng,
            "pre_classifier",
            c.aggregated_dim(),
            c.pre_classifier_width,
        );
        let classifier = Linear::new(
            &mut params,
            &mut rng,
            "classifier",
            c.pre_classifier_width,
            c.num_answers,
        );
        let model = RamenModel {
            config,
            params,
            embedding,
            question_fwd,
            question_bwd,
            input_bn,
            projector,
            aggregator,
            pre_classifier,
            classifier,
        };
        model.check_construction()?;
        Ok(model)
    }

    fn check_construction(&self) -> Result<()> {
        let c = &self.config;
        let q_out = self.question_fwd.hidden + self.question_bwd.as_ref().map_or(0, |b| b.hidden);
        width_check("question encoder", q_out, c.question_dim)?;
        width_check("input batch norm", self.input_bn.dim(), c.projector_input())?;
        width_check("projector input", self.projector.input(), c.projector_input())?;
        width_check("projector output", self.projector.width(), c.projector_width)?;
        if let Some((f, b)) = &self.aggregator {
            width_check("aggregator input", f.input, c.late_fused_dim())?;
            width_check("aggregator output", f.hidden + b.hidden, c.aggregated_dim())?;
        }
        width_check("pre-classifier input", self.pre_classifier.input, c.aggregated_dim())?;
        width_check("classifier output", self.classifier.output, c.num_answers)
    }

    /// Switches batch normalization between batch and running statistics.
    pub fn set_training(&mut self, training: bool) {
        self.input_bn.mode = if training { BnMode::Train } else { BnMode::Eval };
    }

    pub fn is_training(&self) -> bool {
        self.input_bn.mode == BnMode::Train
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Question embeddings `[B x question_dim]`. Each question's state is
    /// read at its own length; padding steps leave the state untouched.
    pub fn encode_question(&self, sess: &mut Session<'_, T>, questions: &[Vec<usize>]) -> Result<Var> {
        if questions.is_empty() {
            return Err(Error::Data("no questions to encode".into()));
        }
        if questions.iter().any(Vec::is_empty) {
            return Err(Error::Data("empty question".into()));
        }
        let b = questions.len();
        let len = questions.iter().map(Vec::len).max().unwrap();
        // time-major: row t * B + i holds token t of question i
        let ids: Vec<usize> = (0..len)
            .flat_map(|t| questions.iter().map(move |q| q.get(t).copied().unwrap_or(0)))
            .collect();
        let words = self.embedding.forward(sess, &ids)?;
        let lengths: Vec<usize> = questions.iter().map(Vec::len).collect();
        let fwd = run_question_gru(&self.question_fwd, sess, words, &lengths, len, false)?;
        let q = match &self.question_bwd {
            None => fwd,
            Some(cell) => {
                let bwd = run_question_gru(cell, sess, words, &lengths, len, true)?;
                sess.tape.concat(&[fwd, bwd], 1)?
            }
        };
        width_check("question embedding", sess.tape.shape(q)[1], self.config.question_dim)?;
        debug_assert_eq!(sess.tape.shape(q)[0], b);
        Ok(q)
    }

    /// `c_i = BatchNorm(r_i ++ q)` for every region of every item,
    /// `[(B * N) x (region_dim + question_dim)]`.
    pub fn early_fuse(&self, sess: &mut Session<'_, T>, batch: &Batch<T>, q: Var) -> Result<Var> {
        let regions = self.regions_var(sess, batch)?;
        let q_rows = sess.tape.repeat_rows(q, batch.num_regions)?;
        let joined = sess.tape.concat(&[regions, q_rows], 1)?;
        Ok(self.input_bn.forward(sess, joined)?)
    }

    fn regions_var(&self, sess: &mut Session<'_, T>, batch: &Batch<T>) -> Result<Var> {
        width_check("region", batch.region_dim, self.config.region_dim())?;
        if batch.num_regions == 0 {
            return Err(Error::Data("a region set needs at least one region".into()));
        }
        let rows = batch.len() * batch.num_regions;
        Ok(sess
            .tape
            .constant(vec![rows, batch.region_dim], batch.regions.clone())?)
    }

    /// Answer logits `[B x num_answers]` for the configured variant.
    pub fn forward(&self, sess: &mut Session<'_, T>, batch: &Batch<T>) -> Result<Var> {
        Ok(self.forward_traced(sess, batch)?.0)
    }

    /// [`forward`](Self::forward) plus the widths observed at each stage.
    pub fn forward_traced(&self, sess: &mut Session<'_, T>, batch: &Batch<T>) -> Result<(Var, ShapeTrace)> {
        let c = &self.config;
        let n = batch.num_regions;
        let bsz = batch.len();
        let mut trace = ShapeTrace {
            region: batch.region_dim,
            ..ShapeTrace::default()
        };
        width_check("region", batch.region_dim, c.region_dim())?;

        let q = self.encode_question(sess, &batch.questions)?;
        trace.question = sess.tape.shape(q)[1];

        let fused = match c.ablation {
            Ablation::NoEarlyFusion => {
                let regions = self.regions_var(sess, batch)?;
                self.input_bn.forward(sess, regions)?
            }
            _ => self.early_fuse(sess, batch, q)?,
        };
        trace.fused = sess.tape.shape(fused)[1];
        width_check("early fusion", trace.fused, c.projector_input())?;

        let projected = self.projector.forward(sess, fused)?;
        trace.projected = sess.tape.shape(projected)[1];
        width_check("projector", trace.projected, c.projector_width)?;

        let late = match c.ablation {
            Ablation::NoLateFusion => projected,
            _ => {
                let q_rows = sess.tape.repeat_rows(q, n)?;
                sess.tape.concat(&[projected, q_rows], 1)?
            }
        };
        trace.late_fused = sess.tape.shape(late)[1];
        width_check("late fusion", trace.late_fused, c.late_fused_dim())?;

        let aggregated = match &self.aggregator {
            None => sess.tape.mean_groups(late, n)?,
            Some((f, b)) => bigru_final(f, b, sess, late, bsz, n)?,
        };
        trace.aggregated = sess.tape.shape(aggregated)[1];
        width_check("aggregator", trace.aggregated, c.aggregated_dim())?;

        let pre = self.pre_classifier.forward(sess, aggregated)?;
        let pre = sess.tape.swish(pre)?;
        let logits = self.classifier.forward(sess, pre)?;
        trace.logits = sess.tape.shape(logits)[1];
        width_check("classifier", trace.logits, c.num_answers)?;
        Ok((logits, trace))
    }

    fn forward_as(&self, want: Ablation, sess: &mut Session<'_, T>, batch: &Batch<T>) -> Result<Var> {
        if self.config.ablation != want {
            return Err(Error::Config(format!(
                "model was built as {}, not {}",
                self.config.ablation.name(),
                want.name()
            )));
        }
        self.forward(sess, batch)
    }

    pub fn forward_full(&self, sess: &mut Session<'_, T>, batch: &Batch<T>) -> Result<Var> {
        self.forward_as(Ablation::Full, sess, batch)
    }

    /// The projector sees `BatchNorm(r_i)` alone; the question only joins
    /// at late fusion.
    pub fn forward_no_early_fusion(&self, sess: &mut Session<'_, T>, batch: &Batch<T>) -> Result<Var> {
        self.forward_as(Ablation::NoEarlyFusion, sess, batch)
    }

    /// The aggregator consumes `b_i` without the question appended.
    pub fn forward_no_late_fusion(&self, sess: &mut Session<'_, T>, batch: &Batch<T>) -> Result<Var> {
        self.forward_as(Ablation::NoLateFusion, sess, batch)
    }

    /// The bidirectional GRU is replaced by the mean of `b_i ++ q`.
    pub fn forward_mean_pool(&self, sess: &mut Session<'_, T>, batch: &Batch<T>) -> Result<Var> {
        self.forward_as(Ablation::MeanPool, sess, batch)
    }

    /// Scalar training loss of `logits` under the configured loss kind.
    pub fn loss(&self, sess: &mut Session<'_, T>, logits: Var, targets: &Targets) -> Result<Var> {
        let v = match (self.config.loss, targets) {
            (LossKind::SoftmaxCrossEntropy, Targets::Single(t)) => sess.tape.softmax_cross_entropy(logits, t)?,
            (LossKind::BinaryCrossEntropy, Targets::Multi(t)) => {
                let t: Vec<T> = t.iter().map(|&v| T::from_f32(v).unwrap()).collect();
                sess.tape.bce_with_logits(logits, &t)?
            }
            (LossKind::BinaryCrossEntropy, Targets::Single(t)) => {
                let a = self.config.num_answers;
                let mut soft = vec![T::zero(); t.len() * a];
                for (r, &i) in t.iter().enumerate() {
                    if i >= a {
                        return Err(Error::Data(format!("answer index {i} out of range")));
                    }
                    soft[r * a + i] = T::one();
                }
                sess.tape.bce_with_logits(logits, &soft)?
            }
            (LossKind::SoftmaxCrossEntropy, Targets::Multi(_)) => {
                return Err(Error::Config(
                    "softmax cross-entropy needs single-answer targets".into(),
                ))
            }
        };
        Ok(v)
    }

    /// Predicted answer index per row; ties go to the lowest index.
    pub fn predict(&self, batch: &Batch<T>) -> Result<Vec<usize>> {
        let mut sess = Session::inference(&self.params);
        let logits = self.forward(&mut sess, batch)?;
        Ok(argmax_rows(sess.tape.value(logits), self.config.num_answers))
    }
}

fn run_question_gru<T: Real>(
    cell: &GruCell,
    sess: &mut Session<'_, T>,
    words: Var,
    lengths: &[usize],
    steps: usize,
    reverse: bool,
) -> Result<Var, TensorError> {
    let b = lengths.len();
    let proj = cell.project(sess, words)?;
    let mut h = sess
        .tape
        .constant(vec![b, cell.hidden], vec![T::zero(); b * cell.hidden])?;
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..steps).rev())
    } else {
        Box::new(0..steps)
    };
    for t in order {
        let rows: Vec<usize> = (t * b..(t + 1) * b).collect();
        let gates = crate::nn::GateInputs {
            z: sess.tape.gather_rows(proj.z, &rows)?,
            r: sess.tape.gather_rows(proj.r, &rows)?,
            h: sess.tape.gather_rows(proj.h, &rows)?,
        };
        let next = cell.step_projected(sess, gates, h)?;
        if lengths.iter().all(|&l| t < l) {
            h = next;
        } else {
            let mut mask = Vec::with_capacity(b * cell.hidden);
            for &l in lengths {
                let m = if t < l { T::one() } else { T::zero() };
                mask.extend(std::iter::repeat_n(m, cell.hidden));
            }
            let mask = sess.tape.constant(vec![b, cell.hidden], mask)?;
            let diff = sess.tape.sub(next, h)?;
            let upd = sess.tape.mul(mask, diff)?;
            h = sess.tape.add(h, upd)?;
        }
    }
    Ok(h)
}

/// Row-wise argmax of a `[rows x cols]` matrix; ties go to the lowest index.
pub fn argmax_rows<T: Real>(values: &[T], cols: usize) -> Vec<usize> {
    values
        .chunks_exact(cols)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
