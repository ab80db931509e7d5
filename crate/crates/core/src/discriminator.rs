//! GRU heads turning the joint embeddings into match probabilities.
//!
//! `p_utt = σ(W_u · (h_t + h_a) + b_u)`, where `h_t` and `h_a` are the final
//! GRU states over the text-joint and audio-joint sequences (`h_a = 0` when
//! no template was enrolled). Per-unit probabilities read only the phoneme
//! and subword row ranges of the text-joint sequence.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Gru, Linear, ParamStore, Tape};
use crate::pattern::AttentionMap;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Model output for one query/enrollment pair.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult<S> {
    pub p_utt: S,
    pub p_phon: Vec<S>,
    pub p_text: Vec<S>,
    pub text_attention: Option<AttentionMap<S>>,
    pub audio_attention: Option<AttentionMap<S>>,
}

/// One line of a score file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub p_utt: f64,
    pub p_phon: Vec<f64>,
    pub p_text: Vec<f64>,
    pub label: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_id: Option<usize>,
}

impl<S: Scalar> MatchResult<S> {
    pub fn to_record(&self, label: u8, split: Option<String>, pair_id: Option<usize>) -> ScoreRecord {
        ScoreRecord {
            p_utt: self.p_utt.as_f64(),
            p_phon: self.p_phon.iter().map(|v| v.as_f64()).collect(),
            p_text: self.p_text.iter().map(|v| v.as_f64()).collect(),
            label,
            split,
            pair_id,
        }
    }
}

/// Probabilities still on the tape.
pub struct ScoreVars {
    pub p_utt: Var,
    pub h_text: Var,
    pub h_audio: Var,
    pub p_phon: Var,
    pub p_text: Var,
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub gru_text: Gru,
    pub gru_audio: Gru,
    /// `W_u`, `b_u`.
    pub fusion: Linear,
    pub phoneme_head: Linear,
    pub subword_head: Linear,
}

impl Discriminator {
    pub fn new<S: Scalar, R: Rng>(store: &mut ParamStore<S>, rng: &mut R, d: usize, hidden: usize) -> Self {
        Self {
            gru_text: Gru::new(store, rng, "disc.gru_text", d, hidden),
            gru_audio: Gru::new(store, rng, "disc.gru_audio", d, hidden),
            fusion: Linear::new(store, rng, "disc.fusion", hidden, 1, false),
            phoneme_head: Linear::new(store, rng, "disc.phoneme_head", d, 1, false),
            subword_head: Linear::new(store, rng, "disc.subword_head", d, 1, false),
        }
    }

    /// Returns `(p_utt, h_t, h_a)`.
    pub fn utterance_score<S: Scalar>(
        &self,
        tape: &mut Tape<'_, S>,
        text_joint: Var,
        audio_joint: &[Var],
    ) -> Result<(Var, Var, Var)> {
        let h_text = self.gru_text.forward(tape, text_joint)?;
        let h_audio = match audio_joint {
            [] => tape.constant(Tensor::zeros(&[1, self.gru_audio.hidden])),
            [single] => self.gru_audio.forward(tape, *single)?,
            many => {
                // several templates: average their final states
                let states = many
                    .iter()
                    .map(|&j| self.gru_audio.forward(tape, j))
                    .collect::<Result<Vec<_>>>()?;
                let stacked = tape.graph.concat_rows(&states)?;
                let ones = tape.constant(Tensor::filled(&[1, states.len()], S::one() / S::of_usize(states.len())));
                tape.graph.matmul(ones, stacked)?
            }
        };
        let fused = tape.graph.add(h_text, h_audio)?;
        let logit = self.fusion.forward(tape, fused)?;
        let p_utt = tape.graph.sigmoid(logit)?;
        Ok((p_utt, h_text, h_audio))
    }

    /// Returns `(p_phon, p_text)` as column vectors of length `T_p`, `T_t`.
    pub fn unit_scores<S: Scalar>(&self, tape: &mut Tape<'_, S>, text_joint: Var, boundaries: &[usize]) -> Result<(Var, Var)> {
        let rows = tape.value(text_joint).rows();
        if boundaries.len() != 3 || boundaries.iter().sum::<usize>() != rows || boundaries[1] == 0 || boundaries[2] == 0 {
            return Err(Error::Shape(format!("boundaries {boundaries:?} do not partition {rows} joint rows")));
        }
        let (tq, tp, tt) = (boundaries[0], boundaries[1], boundaries[2]);
        let phon_rows = tape.graph.slice_rows(text_joint, tq, tp)?;
        let text_rows = tape.graph.slice_rows(text_joint, tq + tp, tt)?;
        let phon_logits = self.phoneme_head.forward(tape, phon_rows)?;
        let text_logits = self.subword_head.forward(tape, text_rows)?;
        Ok((tape.graph.sigmoid(phon_logits)?, tape.graph.sigmoid(text_logits)?))
    }
}
