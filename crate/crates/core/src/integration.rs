//! Global prompt integration: gather prompts across a batch, group them by
//! category, and average each group into a prototype. The prototype bank is
//! shared across all samples in the batch as the classifier.

use ndarray::{Array1, Array2};

use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One extracted prompt with its category label and originating sample.
#[derive(Debug, Clone)]
pub struct PromptBatchEntry<S: Scalar, L> {
    pub prompt: Array1<S>,
    pub label: L,
    pub source_sample: usize,
}

impl<S: Scalar, L> PromptBatchEntry<S, L> {
    pub fn new(prompt: Array1<S>, label: L, source_sample: usize) -> Result<Self> {
        if prompt.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("prompt entry".into()));
        }
        Ok(Self {
            prompt,
            label,
            source_sample,
        })
    }
}

/// Per-category prototype embeddings, ordered by first occurrence.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBank<S: Scalar, L> {
    labels: Vec<L>,
    prototypes: Array2<S>,
}

impl<S: Scalar, L: PartialEq + Clone> PromptBank<S, L> {
    pub fn from_parts(labels: Vec<L>, prototypes: Array2<S>) -> Result<Self> {
        if labels.len() != prototypes.nrows() {
            return Err(Error::DimMismatch {
                context: "prompt bank",
                left: labels.len(),
                right: prototypes.nrows(),
            });
        }
        for (i, l) in labels.iter().enumerate() {
            if labels[..i].contains(l) {
                return Err(Error::Invalid {
                    context: "prompt bank",
                    requirement: "labels must be unique".into(),
                });
            }
        }
        Ok(Self { labels, prototypes })
    }

    pub fn labels(&self) -> &[L] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.ncols()
    }

    pub fn prototype(&self, label: &L) -> Option<Array1<S>> {
        self.index_of(label).map(|i| self.prototypes.row(i).to_owned())
    }

    pub fn index_of(&self, label: &L) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Keep only the listed labels, in the order given.
    pub fn restrict(&self, labels: &[L]) -> Result<Self> {
        let mut rows = Vec::with_capacity(labels.len());
        for l in labels {
            let i = self.index_of(l).ok_or_else(|| Error::Invalid {
                context: "bank restrict",
                requirement: "label not present in bank".into(),
            })?;
            rows.push(self.prototypes.row(i).to_vec());
        }
        let prototypes = Array2::from_shape_fn((labels.len(), self.dim()), |(i, j)| rows[i][j]);
        Self::from_parts(labels.to_vec(), prototypes)
    }
}

/// Average all prompts of each label into its prototype. Bank order is the
/// order in which labels first appear in the entry list.
pub fn integrate_prompts<S: Scalar, L: PartialEq + Clone>(
    entries: &[PromptBatchEntry<S, L>],
) -> Result<PromptBank<S, L>> {
    if entries.is_empty() {
        return Err(Error::EmptyInput("prompt batch"));
    }
    let dim = entries[0].prompt.len();
    let mut labels: Vec<L> = Vec::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (idx, entry) in entries.iter().enumerate() {
        if entry.prompt.len() != dim {
            return Err(Error::DimMismatch {
                context: "prompt batch",
                left: dim,
                right: entry.prompt.len(),
            });
        }
        match labels.iter().position(|l| l == &entry.label) {
            Some(i) => groups[i].push(idx),
            None => {
                labels.push(entry.label.clone());
                groups.push(vec![idx]);
            }
        }
    }
    // Sum each group in a canonical content order so prototypes are exactly
    // reproducible under any permutation of the input entries.
    let mut prototypes = Array2::zeros((labels.len(), dim));
    for (i, group) in groups.iter().enumerate() {
        let mut ordered = group.clone();
        ordered.sort_by(|&a, &b| {
            let pa = &entries[a].prompt;
            let pb = &entries[b].prompt;
            pa.iter()
                .zip(pb.iter())
                .find_map(|(x, y)| x.partial_cmp(y).filter(|o| o.is_ne()))
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let mut sum = Array1::<S>::zeros(dim);
        for &idx in &ordered {
            sum = sum + &entries[idx].prompt;
        }
        prototypes
            .row_mut(i)
            .assign(&(sum / S::from_f64(group.len() as f64)));
    }
    PromptBank::from_parts(labels, prototypes)
}

/// Prototype matrix in bank order, usable as the classifier weights.
pub fn bank_as_classifier<S: Scalar, L: PartialEq + Clone>(
    bank: &PromptBank<S, L>,
) -> Result<EmbeddingMatrix<S>> {
    if bank.is_empty() {
        return Err(Error::EmptyInput("prompt bank"));
    }
    EmbeddingMatrix::new(bank.prototypes.clone())
}

/// Leading articles and quantifiers stripped during phrase normalization.
const STOP_WORDS: [&str; 7] = ["a", "an", "the", "two", "three", "some", "several"];

/// Words that end in `s` but are already singular.
const SINGULAR_S_WORDS: [&str; 8] = [
    "bus", "gas", "lens", "iris", "species", "series", "chassis", "tennis",
];

/// Irregular plural forms.
const IRREGULAR: [(&str, &str); 8] = [
    ("people", "person"),
    ("men", "man"),
    ("women", "woman"),
    ("children", "child"),
    ("geese", "goose"),
    ("mice", "mouse"),
    ("feet", "foot"),
    ("teeth", "tooth"),
];

fn singularize(word: &str) -> String {
    for (plural, singular) in IRREGULAR {
        if word == plural {
            return singular.to_string();
        }
    }
    if SINGULAR_S_WORDS.contains(&word) || word.ends_with("ss") {
        return word.to_string();
    }
    if let Some(stem) = word.strip_suffix("ies") {
        if !stem.is_empty() {
            return format!("{stem}y");
        }
    }
    if let Some(stem) = word.strip_suffix("es") {
        if stem.ends_with("sh")
            || stem.ends_with("ch")
            || stem.ends_with('x')
            || stem.ends_with('z')
            || stem.ends_with('s')
        {
            return stem.to_string();
        }
    }
    if let Some(stem) = word.strip_suffix('s') {
        if !stem.is_empty() {
            return stem.to_string();
        }
    }
    word.to_string()
}

/// Normalize a free-form phrase to a canonical category label: lowercase,
/// strip leading articles/quantifiers, keep the final word as head noun,
/// singularize by rule. A phrase that reduces to nothing falls back to its
/// lowercased form.
pub fn normalize_phrase(phrase: &str) -> String {
    let lowered = phrase.to_lowercase();
    let words: Vec<&str> = lowered
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .collect();
    let mut content = words.as_slice();
    while let Some((first, rest)) = content.split_first() {
        if STOP_WORDS.contains(first) && !rest.is_empty() {
            content = rest;
        } else {
            break;
        }
    }
    match content.last() {
        Some(head) if !STOP_WORDS.contains(head) => singularize(head),
        _ => lowered.trim().to_string(),
    }
}
