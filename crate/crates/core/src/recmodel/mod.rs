//! Causal transformer recommender: continuous item embeddings in, one
//! `K`-way classifier per semantic-code token out.
//!
//! The same model type also carries the ablation variants: a single wide
//! input expert, averaged code embeddings as input, and a regression head
//! onto the continuous embedding space as output.

mod checkpoint;
mod predict;
mod train;

pub use checkpoint::{checkpoint_bytes, load_checkpoint, save_checkpoint, sha256, Checkpoint};
pub use predict::{rank_scores, save_predictions, ScoredCandidates};
pub use train::{train, training_samples, RecEpoch, RecTrainLog, TrainSample};

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::EmbeddingTable;
use crate::error::{Error, Result};
use crate::mhq::SemanticCode;
use crate::msp::MspParams;
use crate::nn::{join, normal, LayerNorm, Linear, Mlp, Parameterized};
use crate::numerics::{GradientTape, Matrix, Segment, Var};

/// Which architecture to build.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Gated experts in, code heads out.
    Full,
    /// One wide ungated expert in, code heads out.
    SingleExpert,
    /// Mean of learned per-token code embeddings in, code heads out.
    DiscreteInput,
    /// Gated experts in, regression onto the embedding space out.
    ContinuousOutput,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::SingleExpert => "single-expert",
            Variant::DiscreteInput => "discrete-input",
            Variant::ContinuousOutput => "continuous-output",
        }
    }

    pub fn uses_codes_out(self) -> bool {
        self != Variant::ContinuousOutput
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "single-expert" => Ok(Variant::SingleExpert),
            "discrete-input" => Ok(Variant::DiscreteInput),
            "continuous-output" => Ok(Variant::ContinuousOutput),
            other => Err(Error::Config(format!("unknown model variant '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecConfig {
    pub d_m: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub experts: usize,
    /// Train on every causal position rather than only the last.
    pub per_position: bool,
    pub variant: Variant,
    pub seed: u64,
}

impl Default for RecConfig {
    fn default() -> Self {
        RecConfig {
            d_m: 448,
            layers: 2,
            heads: 8,
            max_len: 50,
            dropout: 0.1,
            lr: 0.003,
            momentum: 0.9,
            batch: 256,
            max_epochs: 100,
            patience: 20,
            experts: 3,
            per_position: true,
            variant: Variant::Full,
            seed: 0,
        }
    }
}

impl RecConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_m == 0 || self.heads == 0 || self.d_m % self.heads != 0 {
            return fail(format!("d_m {} must be a positive multiple of heads {}", self.d_m, self.heads));
        }
        if self.max_len == 0 || self.batch == 0 || self.max_epochs == 0 || self.experts == 0 {
            return fail("max_len, batch, max_epochs and experts must be positive".into());
        }
        if self.patience > self.max_epochs {
            return fail(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return fail("lr must be non-negative and momentum in [0, 1)".into());
        }
        Ok(())
    }
}

/// Sizes the model takes from its data rather than its config.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelShape {
    /// Width of the continuous item embeddings.
    pub input_dim: usize,
    /// Tokens per semantic code, `M·L`.
    pub code_len: usize,
    pub codebook_size: usize,
}

/// What the model reads about items: their embeddings and codes.
#[derive(Clone, Copy, Debug)]
pub struct Catalog<'a> {
    pub embeddings: &'a EmbeddingTable,
    /// May be empty for the continuous-output variant.
    pub codes: &'a [SemanticCode],
}

impl<'a> Catalog<'a> {
    pub fn new(embeddings: &'a EmbeddingTable, codes: &'a [SemanticCode]) -> Self {
        Catalog { embeddings, codes }
    }

    pub fn n_items(&self) -> usize {
        self.embeddings.n_items()
    }

    fn code(&self, item: usize) -> Result<&'a SemanticCode> {
        self.codes
            .get(item)
            .ok_or_else(|| Error::Config(format!("item {item} has no semantic code")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum InputLayer {
    Experts(MspParams),
    /// One K×d_m table per code token.
    CodeEmbeddings(Vec<Matrix>),
}

#[derive(Clone, Debug, PartialEq)]
pub enum OutputLayer {
    Heads(Vec<Mlp>),
    Regression(Linear),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer {
    pub norm_attn: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub norm_ff: LayerNorm,
    pub ff: Mlp,
}

impl DecoderLayer {
    fn new(rng: &mut impl Rng, d_m: usize) -> Self {
        DecoderLayer {
            norm_attn: LayerNorm::new(d_m),
            query: Linear::new(rng, d_m, d_m),
            key: Linear::new(rng, d_m, d_m),
            value: Linear::new(rng, d_m, d_m),
            out: Linear::new(rng, d_m, d_m),
            norm_ff: LayerNorm::new(d_m),
            ff: Mlp::new(rng, d_m, 4 * d_m, d_m),
        }
    }

    fn forward(
        &self,
        tape: &mut GradientTape,
        x: Var,
        segments: &[Segment],
        heads: usize,
        drop: &mut Dropout<'_>,
    ) -> Var {
        let a = self.norm_attn.forward(tape, x);
        let q = self.query.forward(tape, a);
        let k = self.key.forward(tape, a);
        let v = self.value.forward(tape, a);
        let att = tape.causal_attention(q, k, v, segments, heads);
        let o = self.out.forward(tape, att);
        let o = drop.apply(tape, o);
        let x = tape.add(x, o);
        let b = self.norm_ff.forward(tape, x);
        let f = self.ff.forward(tape, b);
        let f = drop.apply(tape, f);
        tape.add(x, f)
    }
}

impl Parameterized for DecoderLayer {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix)>) {
        self.norm_attn.collect(&join(prefix, "norm_attn"), out);
        self.query.collect(&join(prefix, "query"), out);
        self.key.collect(&join(prefix, "key"), out);
        self.value.collect(&join(prefix, "value"), out);
        self.out.collect(&join(prefix, "out"), out);
        self.norm_ff.collect(&join(prefix, "norm_ff"), out);
        self.ff.collect(&join(prefix, "ff"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Matrix>) {
        self.norm_attn.collect_mut(out);
        self.query.collect_mut(out);
        self.key.collect_mut(out);
        self.value.collect_mut(out);
        self.out.collect_mut(out);
        self.norm_ff.collect_mut(out);
        self.ff.collect_mut(out);
    }
}

/// Inverted dropout driven by the training RNG; a no-op at inference.
pub(crate) struct Dropout<'r> {
    rate: f64,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl<'r> Dropout<'r> {
    pub(crate) fn off() -> Self {
        Dropout { rate: 0.0, rng: None }
    }

    pub(crate) fn new(rate: f64, rng: &'r mut ChaCha8Rng) -> Self {
        Dropout { rate, rng: Some(rng) }
    }

    fn apply(&mut self, tape: &mut GradientTape, x: Var) -> Var {
        let Some(rng) = self.rng.as_deref_mut() else {
            return x;
        };
        if self.rate <= 0.0 {
            return x;
        }
        let (r, c) = tape.value(x).shape();
        let keep = 1.0 - self.rate;
        let data = (0..r * c)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = tape.constant(Matrix::from_vec(r, c, data).expect("finite mask"));
        tape.mul(x, mask)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecModel {
    pub config: RecConfig,
    pub shape: ModelShape,
    pub input: InputLayer,
    pub positions: Matrix,
    pub layers: Vec<DecoderLayer>,
    pub final_norm: LayerNorm,
    pub output: OutputLayer,
}

impl RecModel {
    pub fn new(config: &RecConfig, shape: ModelShape) -> Result<Self> {
        config.validate()?;
        if shape.input_dim == 0 {
            return Err(Error::Config("input embedding width must be positive".into()));
        }
        if config.variant.uses_codes_out() || config.variant == Variant::DiscreteInput {
            if shape.code_len == 0 || shape.codebook_size < 2 {
                return Err(Error::Config(format!(
                    "code heads need code_len >= 1 and K >= 2, got {} and {}",
                    shape.code_len, shape.codebook_size
                )));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d_m = config.d_m;
        let input = match config.variant {
            Variant::Full | Variant::ContinuousOutput => {
                InputLayer::Experts(MspParams::new(&mut rng, shape.input_dim, d_m, config.experts)?)
            }
            Variant::SingleExpert => InputLayer::Experts(MspParams::single_expert(
                &mut rng,
                shape.input_dim,
                d_m,
                config.experts,
            )?),
            Variant::DiscreteInput => InputLayer::CodeEmbeddings(
                (0..shape.code_len)
                    .map(|_| normal(&mut rng, shape.codebook_size, d_m, 0.02))
                    .collect(),
            ),
        };
        let positions = normal(&mut rng, config.max_len, d_m, 0.02);
        let layers = (0..config.layers).map(|_| DecoderLayer::new(&mut rng, d_m)).collect();
        let output = match config.variant {
            Variant::ContinuousOutput => OutputLayer::Regression(Linear::new(&mut rng, d_m, shape.input_dim)),
            _ => OutputLayer::Heads(
                (0..shape.code_len)
                    .map(|_| Mlp::new(&mut rng, d_m, d_m, shape.codebook_size))
                    .collect(),
            ),
        };
        Ok(RecModel {
            config: config.clone(),
            shape,
            input,
            positions,
            layers,
            final_norm: LayerNorm::new(d_m),
            output,
        })
    }

    pub fn d_m(&self) -> usize {
        self.config.d_m
    }

    /// Keeps the most recent `max_len` items.
    pub fn truncate<'s>(&self, seq: &'s [usize]) -> &'s [usize] {
        let start = seq.len().saturating_sub(self.config.max_len);
        &seq[start..]
    }

    fn check_catalog(&self, catalog: &Catalog<'_>) -> Result<()> {
        if catalog.embeddings.dim() != self.shape.input_dim {
            return Err(Error::dim(
                "recmodel",
                format!(
                    "embeddings have width {}, model expects {}",
                    catalog.embeddings.dim(),
                    self.shape.input_dim
                ),
            ));
        }
        Ok(())
    }

    /// Per-item input representations (N×d_m) for a flat list of items.
    fn item_inputs(&self, tape: &mut GradientTape, catalog: &Catalog<'_>, items: &[usize]) -> Result<Var> {
        match &self.input {
            InputLayer::Experts(msp) => {
                if let Some(&bad) = items.iter().find(|&&i| i >= catalog.n_items()) {
                    return Err(Error::Config(format!("item {bad} outside the catalog")));
                }
                let x = tape.constant(catalog.embeddings.matrix().select_rows(items));
                Ok(msp.forward(tape, x))
            }
            InputLayer::CodeEmbeddings(tables) => {
                let codes = items
                    .iter()
                    .map(|&i| catalog.code(i))
                    .collect::<Result<Vec<_>>>()?;
                let mut acc: Option<Var> = None;
                for (j, table) in tables.iter().enumerate() {
                    let mut idx = Vec::with_capacity(items.len());
                    for c in &codes {
                        let t = *c.indices().get(j).ok_or_else(|| {
                            Error::Config(format!("code of length {} but model needs {}", c.len(), tables.len()))
                        })?;
                        if t >= self.shape.codebook_size {
                            return Err(Error::Config(format!("code index {t} out of range")));
                        }
                        idx.push(t);
                    }
                    let tv = tape.param(table);
                    let rows = tape.gather(tv, &idx);
                    acc = Some(match acc {
                        Some(s) => tape.add(s, rows),
                        None => rows,
                    });
                }
                let sum = acc.expect("at least one code token");
                Ok(tape.scale(sum, 1.0 / tables.len() as f64))
            }
        }
    }

    /// Final hidden states for a batch of (already truncated) sequences,
    /// stacked row-wise, plus the segment of each sequence.
    pub(crate) fn encode_batch(
        &self,
        tape: &mut GradientTape,
        catalog: &Catalog<'_>,
        seqs: &[&[usize]],
        drop: &mut Dropout<'_>,
    ) -> Result<(Var, Vec<Segment>)> {
        self.check_catalog(catalog)?;
        let mut flat = Vec::new();
        let mut pos = Vec::new();
        let mut segments = Vec::with_capacity(seqs.len());
        for s in seqs {
            if s.is_empty() {
                return Err(Error::Usage("cannot encode an empty sequence".into()));
            }
            if s.len() > self.config.max_len {
                return Err(Error::Usage(format!(
                    "sequence of length {} exceeds max_len {}",
                    s.len(),
                    self.config.max_len
                )));
            }
            segments.push(Segment {
                start: flat.len(),
                len: s.len(),
            });
            flat.extend_from_slice(s);
            pos.extend(0..s.len());
        }
        let x = self.item_inputs(tape, catalog, &flat)?;
        let p = tape.param(&self.positions);
        let pe = tape.gather(p, &pos);
        let mut h = tape.add(x, pe);
        h = drop.apply(tape, h);
        for layer in &self.layers {
            h = layer.forward(tape, h, &segments, self.config.heads, drop);
        }
        Ok((self.final_norm.forward(tape, h), segments))
    }

    /// Hidden states (T×d_m) of one sequence, truncated to its most recent
    /// `max_len` items.
    pub fn encode_sequence(&self, catalog: &Catalog<'_>, seq: &[usize]) -> Result<Matrix> {
        let mut tape = GradientTape::new();
        let (h, _) = self.encode_batch(&mut tape, catalog, &[self.truncate(seq)], &mut Dropout::off())?;
        Ok(tape.value(h).clone())
    }

    /// Input-layer representation of every catalog item (n_items×d_m).
    pub fn input_representations(&self, catalog: &Catalog<'_>) -> Result<Matrix> {
        self.check_catalog(catalog)?;
        let all: Vec<usize> = (0..catalog.n_items()).collect();
        let mut rows = Vec::with_capacity(all.len());
        for chunk in all.chunks(1024) {
            let mut tape = GradientTape::new();
            let v = self.item_inputs(&mut tape, catalog, chunk)?;
            rows.extend(tape.value(v).row_iter().map(<[f64]>::to_vec));
        }
        Matrix::from_rows(&rows)
    }

    /// Final-position hidden state of each context, one row per context.
    pub fn final_hidden(&self, catalog: &Catalog<'_>, contexts: &[&[usize]]) -> Result<Matrix> {
        let mut rows = Vec::with_capacity(contexts.len());
        for chunk in contexts.chunks(256) {
            let seqs: Vec<&[usize]> = chunk.iter().map(|s| self.truncate(s)).collect();
            let mut tape = GradientTape::new();
            let (h, segs) = self.encode_batch(&mut tape, catalog, &seqs, &mut Dropout::off())?;
            let hv = tape.value(h);
            for s in segs {
                rows.push(hv.row(s.start + s.len - 1).to_vec());
            }
        }
        Matrix::from_rows(&rows)
    }

    /// Head logits on the tape for selected hidden rows (one n×K node per head).
    pub fn head_logits_tape(&self, tape: &mut GradientTape, hidden: Var) -> Result<Vec<Var>> {
        match &self.output {
            OutputLayer::Heads(heads) => Ok(heads.iter().map(|h| h.forward(tape, hidden)).collect()),
            OutputLayer::Regression(_) => Err(Error::Usage(
                "the continuous-output variant has no code heads".into(),
            )),
        }
    }

    /// `M·L` logit vectors for one hidden state.
    pub fn head_logits(&self, hidden: &[f64]) -> Result<Vec<Vec<f64>>> {
        match &self.output {
            OutputLayer::Heads(heads) => Ok(heads.iter().map(|h| h.apply(hidden)).collect()),
            OutputLayer::Regression(_) => Err(Error::Usage(
                "the continuous-output variant has no code heads".into(),
            )),
        }
    }

    /// Mean loss over predicted positions (and heads) for a batch.
    ///
    /// Code heads use cross-entropy averaged over positions and heads; the
    /// regression head uses squared error averaged over positions and
    /// embedding coordinates.
    pub fn loss(
        &self,
        tape: &mut GradientTape,
        catalog: &Catalog<'_>,
        samples: &[TrainSample],
    ) -> Result<Var> {
        self.loss_with(tape, catalog, samples, &mut Dropout::off())
    }

    pub(crate) fn loss_with(
        &self,
        tape: &mut GradientTape,
        catalog: &Catalog<'_>,
        samples: &[TrainSample],
        drop: &mut Dropout<'_>,
    ) -> Result<Var> {
        if samples.is_empty() {
            return Err(Error::Usage("loss needs at least one sample".into()));
        }
        let seqs: Vec<&[usize]> = samples.iter().map(|s| s.inputs.as_slice()).collect();
        let (h, segs) = self.encode_batch(tape, catalog, &seqs, drop)?;
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (s, seg) in samples.iter().zip(&segs) {
            if s.targets.is_empty() || s.targets.len() > seg.len {
                return Err(Error::Usage(format!(
                    "{} targets for a sequence of length {}",
                    s.targets.len(),
                    seg.len
                )));
            }
            let first = seg.start + seg.len - s.targets.len();
            rows.extend(first..seg.start + seg.len);
            targets.extend_from_slice(&s.targets);
        }
        let hs = tape.gather(h, &rows);
        let n = rows.len() as f64;
        match &self.output {
            OutputLayer::Heads(heads) => {
                let codes = targets
                    .iter()
                    .map(|&t| catalog.code(t))
                    .collect::<Result<Vec<_>>>()?;
                let mut total: Option<Var> = None;
                for (j, head) in heads.iter().enumerate() {
                    let mut tj = Vec::with_capacity(codes.len());
                    for c in &codes {
                        let t = *c.indices().get(j).ok_or_else(|| {
                            Error::Config(format!("code of length {} but model has {} heads", c.len(), heads.len()))
                        })?;
                        if t >= self.shape.codebook_size {
                            return Err(Error::Config(format!("code index {t} out of range")));
                        }
                        tj.push(t);
                    }
                    let logits = head.forward(tape, hs);
                    let ce = tape.cross_entropy(logits, &tj);
                    total = Some(match total {
                        Some(s) => tape.add(s, ce),
                        None => ce,
                    });
                }
                let sum = total.expect("at least one head");
                Ok(tape.scale(sum, 1.0 / (n * heads.len() as f64)))
            }
            OutputLayer::Regression(lin) => {
                if let Some(&bad) = targets.iter().find(|&&t| t >= catalog.n_items()) {
                    return Err(Error::Config(format!("target {bad} outside the catalog")));
                }
                let pred = lin.forward(tape, hs);
                let goal = tape.constant(catalog.embeddings.matrix().select_rows(&targets));
                let diff = tape.sub(pred, goal);
                let sq = tape.sum_squares(diff);
                Ok(tape.scale(sq, 1.0 / (n * self.shape.input_dim as f64)))
            }
        }
    }
}

impl Parameterized for RecModel {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix)>) {
        match &self.input {
            InputLayer::Experts(msp) => msp.collect(&join(prefix, "msp"), out),
            InputLayer::CodeEmbeddings(tables) => {
                for (j, t) in tables.iter().enumerate() {
                    out.push((join(prefix, &format!("code_embedding{j}")), t));
                }
            }
        }
        out.push((join(prefix, "positions"), &self.positions));
        for (i, l) in self.layers.iter().enumerate() {
            l.collect(&join(prefix, &format!("layer{i}")), out);
        }
        self.final_norm.collect(&join(prefix, "final_norm"), out);
        match &self.output {
            OutputLayer::Heads(heads) => {
                for (j, h) in heads.iter().enumerate() {
                    h.collect(&join(prefix, &format!("head{j}")), out);
                }
            }
            OutputLayer::Regression(lin) => lin.collect(&join(prefix, "regression"), out),
        }
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Matrix>) {
        match &mut self.input {
            InputLayer::Experts(msp) => msp.collect_mut(out),
            InputLayer::CodeEmbeddings(tables) => out.extend(tables.iter_mut()),
        }
        out.push(&mut self.positions);
        for l in &mut self.layers {
            l.collect_mut(out);
        }
        self.final_norm.collect_mut(out);
        match &mut self.output {
            OutputLayer::Heads(heads) => {
                for h in heads {
                    h.collect_mut(out);
                }
            }
            OutputLayer::Regression(lin) => lin.collect_mut(out),
        }
    }
}
