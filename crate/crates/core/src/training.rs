//! Labels, the three-term loss and the Adam training loop.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augmentation::Lexicon;
use crate::autodiff::{bce, Var};
use crate::corpus::{Corpus, Enrollment, PairKind};
use crate::discriminator::MatchResult;
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::model::{ForwardVars, KwsModel, ModelConfig};
use crate::nn::{ParamStore, Tape};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labels {
    pub utt: u8,
    pub phon: Vec<u8>,
    pub text: Vec<u8>,
}

impl Labels {
    /// A positive pair must mark every unit present.
    pub fn check(&self) -> Result<()> {
        let bad = |v: &[u8]| v.iter().any(|&l| l > 1);
        if self.utt > 1 || bad(&self.phon) || bad(&self.text) {
            return Err(Error::Label(f64::from(self.utt.max(2))));
        }
        if self.utt == 1 && (self.phon.contains(&0) || self.text.contains(&0)) {
            return Err(Error::Invalid("positive pair with a unit label of 0".into()));
        }
        Ok(())
    }
}

/// Utterance label by exact word-sequence equality, word labels by
/// membership in the transcript, phoneme labels by multiset membership in
/// the transcript's phoneme sequence: the k-th occurrence of a phoneme in
/// the keyword is present when the transcript holds at least k of it.
pub fn make_labels<W: AsRef<str>, V: AsRef<str>>(transcript: &[W], enrollment_text: &[V], lexicon: &Lexicon) -> Result<Labels> {
    let query: Vec<&str> = transcript.iter().map(AsRef::as_ref).collect();
    let keyword: Vec<&str> = enrollment_text.iter().map(AsRef::as_ref).collect();
    let query_phon = lexicon.phrase_phonemes(&query)?;
    let keyword_phon = lexicon.phrase_phonemes(&keyword)?;
    let mut available: BTreeMap<usize, usize> = BTreeMap::new();
    for &p in &query_phon.ids {
        *available.entry(p).or_default() += 1;
    }
    let phon = keyword_phon
        .ids
        .iter()
        .map(|p| match available.get_mut(p) {
            Some(n) if *n > 0 => {
                *n -= 1;
                1
            }
            _ => 0,
        })
        .collect();
    let text = keyword.iter().map(|w| u8::from(query.contains(w))).collect();
    Ok(Labels { utt: u8::from(query == keyword), phon, text })
}

/// A query, an enrollment index and checked labels.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair<S> {
    pub pair_id: usize,
    pub query: FeatureMatrix<S>,
    pub enrollment: usize,
    pub labels: Labels,
}

impl<S: Scalar> TrainingPair<S> {
    pub fn new(pair_id: usize, query: FeatureMatrix<S>, enrollment: usize, labels: Labels) -> Result<Self> {
        labels.check()?;
        Ok(Self { pair_id, query, enrollment, labels })
    }
}

/// The three sub-losses and their sum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts<S> {
    pub utt: S,
    pub phon: S,
    pub text: S,
    pub total: S,
}

fn to_scalars<S: Scalar>(v: &[u8]) -> Vec<S> {
    v.iter().map(|&l| S::of(f64::from(l))).collect()
}

fn mean_bce<S: Scalar>(p: &[S], labels: &[u8]) -> Result<S> {
    if p.len() != labels.len() {
        return Err(Error::Shape(format!("{} probabilities vs {} labels", p.len(), labels.len())));
    }
    if p.is_empty() {
        return Err(Error::EmptyInput);
    }
    let sum = p.iter().zip(labels).map(|(&q, &l)| bce(q, S::of(f64::from(l)))).sum::<Result<S>>()?;
    Ok(sum / S::of_usize(p.len()))
}

/// `L_utt + mean L_phon + mean L_text` from finished probabilities.
pub fn total_loss<S: Scalar>(out: &MatchResult<S>, labels: &Labels) -> Result<LossParts<S>> {
    let utt = bce(out.p_utt, S::of(f64::from(labels.utt)))?;
    let phon = mean_bce(&out.p_phon, &labels.phon)?;
    let text = mean_bce(&out.p_text, &labels.text)?;
    Ok(LossParts { utt, phon, text, total: utt + phon + text })
}

/// Loss nodes on the tape.
pub struct LossVars {
    pub utt: Var,
    pub phon: Var,
    pub text: Var,
    pub total: Var,
}

pub fn loss_vars<S: Scalar>(tape: &mut Tape<'_, S>, out: &ForwardVars, labels: &Labels, aux: bool) -> Result<LossVars> {
    let g = &mut tape.graph;
    let utt = g.bce(out.p_utt, &[S::of(f64::from(labels.utt))])?;
    let utt = g.mean(utt)?;
    let phon = g.bce(out.p_phon, &to_scalars(&labels.phon))?;
    let phon = g.mean(phon)?;
    let text = g.bce(out.p_text, &to_scalars(&labels.text))?;
    let text = g.mean(text)?;
    let total = if aux {
        let partial = g.add(utt, phon)?;
        g.add(partial, text)?
    } else {
        utt
    };
    Ok(LossVars { utt, phon, text, total })
}

/// Loss parts and per-parameter gradients of the total for one pair.
pub fn pair_gradients<S: Scalar>(
    model: &KwsModel<S>,
    query: &FeatureMatrix<S>,
    enrollment: &Enrollment<S>,
    labels: &Labels,
    aux: bool,
) -> Result<(LossParts<S>, Vec<Tensor<S>>)> {
    let mut tape = Tape::new(&model.store);
    let out = model.forward(&mut tape, query, enrollment)?;
    let loss = loss_vars(&mut tape, &out, labels, aux)?;
    let grads = tape.graph.backward(loss.total)?;
    let item = |v: Var| tape.value(v).item();
    let parts = LossParts { utt: item(loss.utt), phon: item(loss.phon), text: item(loss.text), total: item(loss.total) };
    Ok((parts, tape.param_gradients(&grads)))
}

/// Adam with bias correction; frozen parameters are skipped.
#[derive(Clone, Debug)]
pub struct Adam<S> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(store: &ParamStore<S>, lr: f64) -> Self {
        let zeros = || store.iter().map(|(_, p)| vec![S::zero(); p.value.numel()]).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros(), v: zeros() }
    }

    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &[Tensor<S>]) -> Result<()> {
        self.step += 1;
        let (b1, b2) = (S::of(self.beta1), S::of(self.beta2));
        let c1 = S::one() - b1.powi(self.step);
        let c2 = S::one() - b2.powi(self.step);
        let (lr, eps) = (S::of(self.lr), S::of(self.eps));
        let ids: Vec<_> = store.iter().filter(|(_, p)| !p.frozen).map(|(id, _)| id).collect();
        for id in ids {
            let i = id.index();
            let mut value = store.value(id).clone();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((x, &g), m), v) in value.data_mut().iter_mut().zip(grads[i].data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (S::one() - b1) * g;
                *v = b2 * *v + (S::one() - b2) * g * g;
                let update = lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                *x = *x - update;
            }
            store.set(id, value)?;
        }
        Ok(())
    }
}

/// Pairs drawn per anchor keyword in each batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchMix {
    pub positives: usize,
    pub hard: usize,
    pub random: usize,
}

impl Default for BatchMix {
    fn default() -> Self {
        Self { positives: 1, hard: 1, random: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub steps: usize,
    /// Anchor keywords per batch.
    pub batch_anchors: usize,
    pub mix: BatchMix,
    pub lr: f64,
    pub seed: u64,
    /// Train on `L_phon` and `L_text` as well as `L_utt`.
    pub aux_loss: bool,
    /// Probability of scoring a pair with its templates removed.
    pub template_dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            steps: 2000,
            batch_anchors: 4,
            mix: BatchMix::default(),
            lr: 1e-3,
            seed: 0,
            aux_loss: true,
            template_dropout: 0.25,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_anchors == 0 || self.mix.positives + self.mix.hard + self.mix.random == 0 {
            return Err(Error::Invalid("batch must hold at least one pair".into()));
        }
        if !(self.lr >= 0.0) || !(0.0..=1.0).contains(&self.template_dropout) {
            return Err(Error::Invalid("lr must be >= 0 and template_dropout in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Batch-mean losses at one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub utt: f64,
    pub phon: f64,
    pub text: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossLog {
    pub rows: Vec<LossRow>,
}

impl LossLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss_utt,loss_phon,loss_text,total\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.step, r.utt, r.phon, r.text, r.total);
        }
        s
    }

    /// Mean total loss over the first and the last `fraction` of steps.
    pub fn head_tail_means(&self, fraction: f64) -> Option<(f64, f64)> {
        let n = ((self.rows.len() as f64 * fraction).ceil() as usize).max(1);
        if self.rows.len() < 2 * n {
            return None;
        }
        let mean = |rows: &[LossRow]| rows.iter().map(|r| r.total).sum::<f64>() / rows.len() as f64;
        Some((mean(&self.rows[..n]), mean(&self.rows[self.rows.len() - n..])))
    }
}

/// Training pairs grouped per anchor keyword.
pub struct TrainingSet<S> {
    pub enrollments: Vec<Enrollment<S>>,
    pub pairs: Vec<TrainingPair<S>>,
    by_anchor: BTreeMap<usize, [Vec<usize>; 3]>,
}

impl<S: Scalar> TrainingSet<S> {
    pub fn from_corpus(corpus: &Corpus<S>, lexicon: &Lexicon) -> Result<Self> {
        let mut pairs = Vec::with_capacity(corpus.train.len());
        let mut by_anchor: BTreeMap<usize, [Vec<usize>; 3]> = BTreeMap::new();
        for p in &corpus.train {
            let e = &corpus.enrollments[p.enrollment];
            let labels = make_labels(&p.query_text, &e.text, lexicon)?;
            if labels.utt != p.label {
                return Err(Error::Invalid(format!("pair {} stores label {} but texts give {}", p.pair_id, p.label, labels.utt)));
            }
            let slot = match p.kind {
                PairKind::Positive => 0,
                PairKind::Hard => 1,
                PairKind::Easy => 2,
            };
            by_anchor.entry(p.enrollment).or_default()[slot].push(pairs.len());
            pairs.push(TrainingPair::new(p.pair_id, p.query.clone(), p.enrollment, labels)?);
        }
        if !pairs.iter().any(|p| p.labels.utt == 1) || !pairs.iter().any(|p| p.labels.utt == 0) {
            return Err(Error::Invalid("training data needs positive and negative pairs".into()));
        }
        Ok(Self { enrollments: corpus.enrollments.clone(), pairs, by_anchor })
    }

    /// One pair and its enrollment, as a set.
    pub fn single(pair: TrainingPair<S>, enrollment: Enrollment<S>) -> Self {
        let pair = TrainingPair { enrollment: 0, ..pair };
        let slot = if pair.labels.utt == 1 { 0 } else { 2 };
        let mut groups: [Vec<usize>; 3] = Default::default();
        groups[slot].push(0);
        Self { enrollments: vec![enrollment], pairs: vec![pair], by_anchor: BTreeMap::from([(0, groups)]) }
    }

    fn sample_batch<R: Rng>(&self, rng: &mut R, cfg: &TrainConfig) -> Vec<usize> {
        let anchors: Vec<usize> = self.by_anchor.keys().copied().collect();
        let mut batch = Vec::new();
        for _ in 0..cfg.batch_anchors {
            let [pos, hard, easy] = &self.by_anchor[anchors.choose(rng).expect("anchors")];
            let negatives = if hard.is_empty() { easy } else { hard };
            for (group, n) in [(pos, cfg.mix.positives), (negatives, cfg.mix.hard), (easy, cfg.mix.random)] {
                for _ in 0..n {
                    if let Some(&i) = group.choose(rng) {
                        batch.push(i);
                    }
                }
            }
        }
        batch
    }
}

/// Runs `cfg.steps` Adam steps on batch-mean gradients.
pub fn train<S: Scalar>(model: &mut KwsModel<S>, data: &TrainingSet<S>, cfg: &TrainConfig) -> Result<LossLog> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&model.store, cfg.lr);
    let mut log = LossLog::default();
    for step in 0..cfg.steps {
        let batch = data.sample_batch(&mut rng, cfg);
        let mut acc: Option<Vec<Tensor<S>>> = None;
        let mut sums = [0.0f64; 4];
        for &i in &batch {
            let pair = &data.pairs[i];
            let enrollment = &data.enrollments[pair.enrollment];
            let drop = cfg.template_dropout > 0.0 && rng.random_bool(cfg.template_dropout);
            let stripped;
            let enrollment = if drop {
                stripped = enrollment.without_templates();
                &stripped
            } else {
                enrollment
            };
            let (parts, grads) = pair_gradients(model, &pair.query, enrollment, &pair.labels, cfg.aux_loss)?;
            let non_finite = !parts.total.is_finite() || grads.iter().any(|g| !g.is_finite());
            if non_finite {
                return Err(Error::NonFinite { step, pairs: batch.iter().map(|&j| data.pairs[j].pair_id).collect() });
            }
            for (s, v) in sums.iter_mut().zip([parts.utt, parts.phon, parts.text, parts.total]) {
                *s += v.as_f64();
            }
            match &mut acc {
                None => acc = Some(grads),
                Some(a) => {
                    for (t, g) in a.iter_mut().zip(&grads) {
                        for (x, &y) in t.data_mut().iter_mut().zip(g.data()) {
                            *x = *x + y;
                        }
                    }
                }
            }
        }
        let n = batch.len() as f64;
        log.rows.push(LossRow { step, utt: sums[0] / n, phon: sums[1] / n, text: sums[2] / n, total: sums[3] / n });
        let mut grads = acc.expect("nonempty batch");
        let scale = S::of(1.0 / n);
        for g in &mut grads {
            g.data_mut().iter_mut().for_each(|x| *x = *x * scale);
        }
        adam.step(&mut model.store, &grads)?;
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augmentation::lexicon::phoneme_id;
    use crate::vocab::Vocabulary;

    fn lexicon() -> Lexicon {
        Lexicon::parse(
            "good\tG UH D\nboy\tB OY\nnight\tN AY T\nin\tIH N\nthe\tDH AH\nunited\tY UW N AY T IH D\nstates\tS T EY T S\n",
        )
        .unwrap()
    }

    #[test]
    fn label_examples() {
        let lex = lexicon();
        let l = make_labels(&["good", "boy"], &["good", "boy"], &lex).unwrap();
        assert_eq!(l, Labels { utt: 1, phon: vec![1; 5], text: vec![1, 1] });

        let l = make_labels(&["in", "the", "united", "states"], &["good", "boy"], &lex).unwrap();
        assert_eq!(l.utt, 0);
        assert_eq!(l.text, vec![0, 0]);
        // only D of G UH D B OY occurs in the transcript
        assert_eq!(l.phon, vec![0, 0, 1, 0, 0]);

        let l = make_labels(&["good", "night"], &["good", "boy"], &lex).unwrap();
        assert_eq!((l.utt, l.text.clone()), (0, vec![1, 0]));
        assert_eq!(l.phon, vec![1, 1, 1, 0, 0]);

        match make_labels(&["good", "girl"], &["good", "boy"], &lex) {
            Err(Error::MissingWord(w)) => assert_eq!(w, "girl"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn phoneme_labels_count_occurrences() {
        let lex = Lexicon::parse("tat\tT AE T\nat\tAE T\n").unwrap();
        let l = make_labels(&["at"], &["tat"], &lex).unwrap();
        assert_eq!(l.phon, vec![1, 1, 0]);
        assert_eq!(phoneme_id("T"), Some(30));
    }

    #[test]
    fn positive_pairs_need_all_ones() {
        let bad = Labels { utt: 1, phon: vec![1, 0], text: vec![1] };
        let q = FeatureMatrix::<f64>::from_rows(&[vec![0.0]]).unwrap();
        assert!(TrainingPair::new(0, q.clone(), 0, bad).is_err());
        let ok = Labels { utt: 0, phon: vec![1, 0], text: vec![0] };
        assert!(TrainingPair::new(0, q, 0, ok).is_ok());
    }

    fn result(p_utt: f64, p_phon: Vec<f64>, p_text: Vec<f64>) -> MatchResult<f64> {
        MatchResult { p_utt, p_phon, p_text, text_attention: None, audio_attention: None }
    }

    #[test]
    fn loss_examples() {
        let labels = Labels { utt: 1, phon: vec![1, 0], text: vec![0] };
        let perfect = total_loss(&result(1.0, vec![1.0, 0.0], vec![0.0]), &labels).unwrap();
        assert!(perfect.total < 1e-6);
        let half = total_loss(&result(0.5, vec![0.5, 0.5], vec![0.5]), &labels).unwrap();
        assert!((half.total - 3.0 * 2f64.ln()).abs() < 1e-12);

        let out = result(0.8, vec![0.3, 0.6, 0.9], vec![0.2, 0.7]);
        let labels = Labels { utt: 0, phon: vec![1, 0, 1], text: vec![0, 1] };
        let parts = total_loss(&out, &labels).unwrap();
        let utt = -(0.2f64).ln();
        let phon = (-(0.3f64).ln() - (0.4f64).ln() - (0.9f64).ln()) / 3.0;
        let text = (-(0.8f64).ln() - (0.7f64).ln()) / 2.0;
        assert!((parts.utt - utt).abs() < 1e-12);
        assert!((parts.phon - phon).abs() < 1e-12);
        assert!((parts.text - text).abs() < 1e-12);
        assert_eq!(parts.total, parts.utt + parts.phon + parts.text);
        assert!(total_loss(&out, &Labels { utt: 0, phon: vec![1], text: vec![0, 1] }).is_err());
    }

    fn tiny_setup() -> (KwsModel<f64>, TrainingSet<f64>) {
        let lex = lexicon();
        let vocab = Vocabulary::from_words(lex.words());
        let cfg = ModelConfig::tiny(vocab.len());
        let model = KwsModel::new(cfg, 3).unwrap();
        let bank = crate::augmentation::PrototypeBank::new(39, 3, 1);
        let render = |text: &str, seed| {
            let words = crate::augmentation::split_phrase(text);
            bank.render(&lex.phrase_phonemes(&words).unwrap(), seed, &Default::default()).unwrap()
        };
        let e = Enrollment::new("good boy", &lex, &vocab, vec![render("good boy", 1)]).unwrap();
        let labels = make_labels(&["good", "boy"], &["good", "boy"], &lex).unwrap();
        let pair = TrainingPair::new(0, render("good boy", 2), 0, labels).unwrap();
        (model, TrainingSet::single(pair, e))
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (mut model, data) = tiny_setup();
        let before = model.store.clone();
        let cfg = TrainConfig { model: model.config.clone(), steps: 5, lr: 0.0, batch_anchors: 1, ..TrainConfig::default() };
        train(&mut model, &data, &cfg).unwrap();
        assert_eq!(model.store, before);
    }

    #[test]
    fn training_is_deterministic_and_respects_frozen() {
        let (model, data) = tiny_setup();
        let cfg = TrainConfig { model: model.config.clone(), steps: 10, batch_anchors: 2, ..TrainConfig::default() };
        let (mut a, mut b) = (model.clone(), model.clone());
        let la = train(&mut a, &data, &cfg).unwrap();
        let lb = train(&mut b, &data, &cfg).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a.store, b.store);
        for ((_, p0), (_, p1)) in model.store.iter().zip(a.store.iter()) {
            if p0.frozen {
                assert_eq!(p0.value, p1.value, "{}", p0.name);
            }
        }
        assert!(model.store.iter().any(|(_, p)| p.frozen));
        assert!(la.to_csv().starts_with("step,loss_utt,loss_phon,loss_text,total\n"));
    }
}
