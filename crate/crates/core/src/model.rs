//! The full matcher: feature extraction, the two attention modules and the
//! discriminator, sharing one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Var;
use crate::corpus::Enrollment;
use crate::discriminator::{Discriminator, MatchResult};
use crate::error::{Error, Result};
use crate::features::{AudioEncoder, AudioEncoderShape, FeatureExtractor, FeatureMatrix, LookupEmbedder};
use crate::nn::{ParamStore, Tape};
use crate::pattern::{JointVar, PatternExtractor};
use crate::scalar::Scalar;

/// Architecture. Every field affects parameter shapes or the forward pass.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feat_dim: usize,
    pub d: usize,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    pub subsample: usize,
    pub conv_kernel: usize,
    pub ff_mult: usize,
    pub attention_layers: usize,
    pub attention_heads: usize,
    pub gru_hidden: usize,
    pub phoneme_dim: usize,
    pub text_dim: usize,
    pub phoneme_inventory: usize,
    pub subword_vocab: usize,
    pub positional: bool,
    pub freeze_support_speech: bool,
    /// When unset, speech templates are ignored and `h_a` is always zero.
    pub use_speech_branch: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feat_dim: 40,
            d: 16,
            encoder_layers: 2,
            encoder_heads: 2,
            subsample: 2,
            conv_kernel: 3,
            ff_mult: 2,
            attention_layers: 2,
            attention_heads: 2,
            gru_hidden: 16,
            phoneme_dim: 16,
            text_dim: 16,
            phoneme_inventory: crate::augmentation::INVENTORY.len(),
            subword_vocab: 1,
            positional: true,
            freeze_support_speech: true,
            use_speech_branch: true,
        }
    }
}

impl ModelConfig {
    /// Smallest useful configuration, for gradient checks.
    pub fn tiny(subword_vocab: usize) -> Self {
        Self {
            feat_dim: 3,
            d: 4,
            encoder_layers: 1,
            encoder_heads: 1,
            attention_layers: 1,
            attention_heads: 1,
            gru_hidden: 4,
            phoneme_dim: 3,
            text_dim: 3,
            subword_vocab,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.feat_dim,
            self.d,
            self.encoder_heads,
            self.subsample,
            self.conv_kernel,
            self.ff_mult,
            self.attention_heads,
            self.gru_hidden,
            self.phoneme_dim,
            self.text_dim,
            self.phoneme_inventory,
            self.subword_vocab,
        ];
        if positive.contains(&0) {
            return Err(Error::Invalid("model dimensions must be positive".into()));
        }
        if self.d % self.encoder_heads != 0 || self.d % self.attention_heads != 0 {
            return Err(Error::Invalid(format!("d = {} not divisible by the head count", self.d)));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(Error::Invalid("convolution kernel must be odd".into()));
        }
        Ok(())
    }

    fn encoder_shape(&self) -> AudioEncoderShape {
        AudioEncoderShape {
            feat_dim: self.feat_dim,
            width: self.d,
            layers: self.encoder_layers,
            heads: self.encoder_heads,
            subsample: self.subsample,
            conv_kernel: self.conv_kernel,
            ff_mult: self.ff_mult,
            out_dim: self.d,
        }
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        hash_json(&serde_json::to_value(self).expect("config serializes"))
    }
}

pub fn hash_json(value: &serde_json::Value) -> String {
    let digest = Sha256::digest(value.to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Tape handles for one forward pass.
pub struct ForwardVars {
    pub p_utt: Var,
    pub p_phon: Var,
    pub p_text: Var,
    pub h_text: Var,
    pub h_audio: Var,
    pub text_joint: JointVar,
    pub audio_joints: Vec<JointVar>,
}

#[derive(Clone, Debug)]
pub struct KwsModel<S> {
    pub config: ModelConfig,
    pub store: ParamStore<S>,
    pub extractor: FeatureExtractor,
    pub pattern: PatternExtractor,
    pub discriminator: Discriminator,
}

impl<S: Scalar> KwsModel<S> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let shape = config.encoder_shape();
        let query = AudioEncoder::new(&mut store, &mut rng, "query_encoder", shape, false);
        let support_speech =
            AudioEncoder::new(&mut store, &mut rng, "support_speech", shape, config.freeze_support_speech);
        let phonemes =
            LookupEmbedder::new(&mut store, &mut rng, "phoneme", config.phoneme_inventory, config.phoneme_dim, config.d);
        let subwords = LookupEmbedder::new(&mut store, &mut rng, "subword", config.subword_vocab, config.text_dim, config.d);
        let extractor = FeatureExtractor { query, support_speech, phonemes, subwords };
        let pattern = PatternExtractor::new(
            &mut store,
            &mut rng,
            config.d,
            config.attention_layers,
            config.attention_heads,
            config.ff_mult,
            config.positional,
        );
        let discriminator = Discriminator::new(&mut store, &mut rng, config.d, config.gru_hidden);
        Ok(Self { config, store, extractor, pattern, discriminator })
    }

    pub fn forward(&self, tape: &mut Tape<'_, S>, query: &FeatureMatrix<S>, enrollment: &Enrollment<S>) -> Result<ForwardVars> {
        let q = self.extractor.encode_query_audio(tape, query)?;
        let p = self.extractor.embed_phonemes(tape, &enrollment.phonemes)?;
        let t = self.extractor.embed_subwords(tape, &enrollment.subwords)?;
        let text_joint = self.pattern.qtam(tape, q, p, t)?;

        let mut audio_joints = Vec::new();
        if self.config.use_speech_branch {
            for template in &enrollment.templates {
                let s = self.extractor.encode_support_speech(tape, template)?;
                if let Some(j) = self.pattern.qaam(tape, q, Some(s))? {
                    audio_joints.push(j);
                }
            }
        }
        let audio_rows: Vec<Var> = audio_joints.iter().map(|j| j.rows).collect();
        let (p_utt, h_text, h_audio) = self.discriminator.utterance_score(tape, text_joint.rows, &audio_rows)?;
        let (p_phon, p_text) = self.discriminator.unit_scores(tape, text_joint.rows, &text_joint.boundaries)?;
        Ok(ForwardVars { p_utt, p_phon, p_text, h_text, h_audio, text_joint, audio_joints })
    }

    /// Scores one pair; attention maps are kept for the text module and the
    /// first template.
    pub fn score(&self, query: &FeatureMatrix<S>, enrollment: &Enrollment<S>) -> Result<MatchResult<S>> {
        let mut tape = Tape::new(&self.store);
        let out = self.forward(&mut tape, query, enrollment)?;
        let (_, text_map) = out.text_joint.materialize(&tape);
        let audio_attention = out.audio_joints.first().map(|j| j.materialize(&tape).1);
        Ok(MatchResult {
            p_utt: tape.value(out.p_utt).item(),
            p_phon: tape.value(out.p_phon).data().to_vec(),
            p_text: tape.value(out.p_text).data().to_vec(),
            text_attention: Some(text_map),
            audio_attention,
        })
    }

    /// Utterance probability only.
    pub fn p_utt(&self, query: &FeatureMatrix<S>, enrollment: &Enrollment<S>) -> Result<S> {
        let mut tape = Tape::new(&self.store);
        let out = self.forward(&mut tape, query, enrollment)?;
        Ok(tape.value(out.p_utt).item())
    }
}
