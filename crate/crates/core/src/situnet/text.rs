//! Word vocabulary, answer vocabulary and the learned text encoder.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, NnError};
use crate::scenegen::{CATEGORIES, CATEGORY_PLURALS, COLORS};
use crate::tinynn::{Graph, Matrix, ParamId, ParamKind, ParameterSet, Var};

/// Words used by the scene generator's templates besides object names.
const TEMPLATE_WORDS: &[&str] = &[
    "i", "am", "standing", "beside", "the", "facing", "is", "on", "my", "left", "right", "can",
    "see", "without", "turning", "around", "which", "object", "in", "front", "of", "me",
    "behind", "how", "many", "are", "room", "what", "closest", "to", "color", "yes", "no", "0",
    "1", "2", "3", "4", "5", "6", "7", "8", "9",
];

/// Lowercased alphanumeric runs of `text`.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(words: impl IntoIterator<Item = String>) -> Self {
        let mut out = Self {
            words: Vec::new(),
            index: HashMap::new(),
        };
        for w in words {
            if !out.index.contains_key(&w) {
                out.index.insert(w.clone(), out.words.len());
                out.words.push(w);
            }
        }
        out
    }

    /// Every word the scene generator can emit.
    pub fn standard() -> Self {
        let all = TEMPLATE_WORDS
            .iter()
            .chain(CATEGORIES.iter())
            .chain(CATEGORY_PLURALS.iter())
            .chain(COLORS.iter().map(|c| &c.0))
            .map(|w| w.to_string());
        Self::new(all)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>, ModelError> {
        words(text)
            .into_iter()
            .map(|w| self.id(&w).ok_or(ModelError::UnknownToken(w)))
            .collect()
    }

    /// Rebuilds the lookup table after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TextRole {
    Situation,
    Question,
}

impl TextRole {
    fn index(self) -> usize {
        match self {
            TextRole::Situation => 0,
            TextRole::Question => 1,
        }
    }
}

/// Token ids padded to a fixed length with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TextTokens {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub role: TextRole,
}

impl TextTokens {
    /// Truncates to `max_len` words and pads the rest.
    pub fn new(mut ids: Vec<usize>, max_len: usize, role: TextRole) -> Self {
        ids.truncate(max_len);
        let n = ids.len();
        ids.resize(max_len, 0);
        let mask = (0..max_len).map(|i| i < n).collect();
        Self { ids, mask, role }
    }

    pub fn empty(max_len: usize, role: TextRole) -> Self {
        Self::new(Vec::new(), max_len, role)
    }

    pub fn num_real(&self) -> usize {
        self.mask.iter().take_while(|&&m| m).count()
    }

    pub fn real_ids(&self) -> &[usize] {
        &self.ids[..self.num_real()]
    }
}

/// Word, position and role embeddings summed per token.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub word: ParamId,
    pub position: ParamId,
    pub role: ParamId,
    pub max_len: usize,
    pub dim: usize,
}

impl TextEncoder {
    pub fn new(
        params: &mut ParameterSet,
        vocab_size: usize,
        max_len: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, NnError> {
        let mut table = |name: &str, rows: usize, rng: &mut dyn rand::RngCore| {
            let data = (0..rows * dim).map(|_| rng.random_range(-0.5..0.5)).collect();
            params.add(name, ParamKind::Embedding, Matrix::from_vec(rows, dim, data))
        };
        Ok(Self {
            word: table("text.word", vocab_size.max(1), rng)?,
            position: table("text.position", max_len, rng)?,
            role: table("text.role", 2, rng)?,
            max_len,
            dim,
        })
    }

    /// Embeds the real tokens only (`n_real × dim`); `None` for empty text.
    pub fn embed(&self, g: &mut Graph, p: &ParameterSet, t: &TextTokens) -> Result<Option<Var>, NnError> {
        let ids = t.real_ids();
        if ids.is_empty() {
            return Ok(None);
        }
        let word = g.param(p, self.word);
        let pos = g.param(p, self.position);
        let role = g.param(p, self.role);
        let w = g.select_rows(word, ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let ps = g.select_rows(pos, &positions)?;
        let r = g.select_rows(role, &[t.role.index()])?;
        let x = g.add(w, ps)?;
        g.add_row(x, r).map(Some)
    }

    /// Full fixed-length embedding with padded rows zeroed.
    pub fn embed_padded(&self, g: &mut Graph, p: &ParameterSet, t: &TextTokens) -> Result<Var, NnError> {
        let word = g.param(p, self.word);
        let pos = g.param(p, self.position);
        let role = g.param(p, self.role);
        let w = g.select_rows(word, &t.ids)?;
        let positions: Vec<usize> = (0..t.ids.len()).collect();
        let ps = g.select_rows(pos, &positions)?;
        let r = g.select_rows(role, &[t.role.index()])?;
        let x = g.add(w, ps)?;
        let x = g.add_row(x, r)?;
        g.mask_rows(x, &t.mask)
    }
}

/// Candidate answers, most frequent first with lexicographic tie-breaks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerVocab {
    pub answers: Vec<String>,
}

impl AnswerVocab {
    pub fn from_answers<'a>(answers: impl IntoIterator<Item = &'a str>) -> Self {
        let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
        for a in answers {
            *freq.entry(a).or_default() += 1;
        }
        let mut v: Vec<(&str, usize)> = freq.into_iter().collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        Self {
            answers: v.into_iter().map(|(a, _)| a.to_string()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    pub fn index(&self, answer: &str) -> Option<usize> {
        self.answers.iter().position(|a| a == answer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn standard_vocab_covers_templates() {
        let v = Vocabulary::standard();
        let ids = v.encode("I am standing beside the trashcan facing the TV.").unwrap();
        assert_eq!(ids.len(), 9);
        assert!(v.encode("How many shelves are in the room?").is_ok());
        assert!(matches!(v.encode("a zebra"), Err(ModelError::UnknownToken(w)) if w == "a"));
    }

    #[test]
    fn answer_vocab_order() {
        let a = AnswerVocab::from_answers(["no", "yes", "chair", "yes", "no", "bed"]);
        assert_eq!(a.answers, ["no", "yes", "bed", "chair"]);
        assert_eq!(a.index("bed"), Some(2));
        assert_eq!(a.index("sofa"), None);
    }

    #[test]
    fn embedding_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ParameterSet::new();
        let v = Vocabulary::standard();
        let enc = TextEncoder::new(&mut p, v.len(), 100, 8, &mut rng).unwrap();
        let t1 = TextTokens::new(v.encode("is the chair on my left").unwrap(), 100, TextRole::Question);
        let t2 = TextTokens::new(v.encode("is the chair on my right").unwrap(), 100, TextRole::Question);
        let mut g = Graph::new();
        let a = enc.embed(&mut g, &p, &t1).unwrap().unwrap();
        let b = enc.embed(&mut g, &p, &t1).unwrap().unwrap();
        let c = enc.embed(&mut g, &p, &t2).unwrap().unwrap();
        assert_eq!(g.value(a), g.value(b));
        assert_ne!(g.value(a), g.value(c));
        assert_eq!(g.shape(a), (6, 8));

        let padded = enc.embed_padded(&mut g, &p, &t1).unwrap();
        let pv = g.value(padded);
        assert_eq!(pv.shape(), (100, 8));
        for i in 0..100 {
            if i < 6 {
                assert_eq!(pv.row(i), g.value(a).row(i));
            } else {
                assert!(pv.row(i).iter().all(|&x| x == 0.0));
            }
        }
        let empty = TextTokens::empty(100, TextRole::Situation);
        assert!(enc.embed(&mut g, &p, &empty).unwrap().is_none());
        assert!(empty.mask.iter().all(|&m| !m));
    }
}
