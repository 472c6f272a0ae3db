//! The unified sample format: every task is rendered as a task description,
//! an instruction, and a response whose tail carries the summary token from
//! which visual queries are later derived.

use percept_core::{Annotation, Label, LabeledImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Task description used by every word-based sample.
pub const WORD_TASK_DESCRIPTION: &str =
    "Please identify all objects according to the given phrase list. This is all the candidate phrases.";

/// Task description used by every sentence-based sample.
pub const SENTENCE_TASK_DESCRIPTION: &str =
    "Please identify the target according to the following instruction.";

/// Marker whose hidden state summarizes the perception request.
pub const SUMMARY_TOKEN: &str = "<PER>";

#[derive(Debug, Error)]
pub enum CurationError {
    #[error("image {image_ref} has no annotations with usable labels")]
    NoUsableTargets { image_ref: String },
    #[error("vocabulary is empty")]
    EmptyVocab,
    #[error("vocabulary has no entry for category {category}")]
    VocabMissingCategory { category: u32 },
    #[error("image {image_ref} has no accepted caption")]
    NoAcceptedCaption { image_ref: String },
    #[error("referring expression is empty")]
    EmptyExpression,
    #[error("label budget {budget} is smaller than the {positives} required positives")]
    BudgetTooSmall { budget: usize, positives: usize },
    #[error("malformed sample: {detail}")]
    Malformed { detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    WordBased,
    SentenceBased,
}

/// One supervised-finetuning record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftSample {
    pub task_kind: TaskKind,
    pub task_description: String,
    pub instruction: String,
    pub response: String,
    pub image_ref: String,
    pub targets: Vec<Annotation>,
    pub positive_labels: Vec<String>,
    pub negative_labels: Vec<String>,
}

impl SftSample {
    /// Re-checks every structural invariant (used after deserialization).
    pub fn validate(&self) -> Result<(), CurationError> {
        if self.response.matches(SUMMARY_TOKEN).count() != 1 {
            return Err(CurationError::Malformed {
                detail: format!("response must contain exactly one {SUMMARY_TOKEN}"),
            });
        }
        let suffix = format!(". The perception result is {SUMMARY_TOKEN}");
        let Some(caption) = self.response.strip_suffix(&suffix) else {
            return Err(CurationError::Malformed {
                detail: "response does not end with the perception-result template".into(),
            });
        };
        if caption.trim().is_empty() {
            return Err(CurationError::Malformed { detail: "response caption is empty".into() });
        }
        match self.task_kind {
            TaskKind::WordBased => {
                if self.task_description != WORD_TASK_DESCRIPTION {
                    return Err(CurationError::Malformed {
                        detail: "word-based task description mismatch".into(),
                    });
                }
                let listed: Vec<&str> = self.instruction.split(", ").collect();
                for p in &self.positive_labels {
                    if !listed.contains(&p.as_str()) {
                        return Err(CurationError::Malformed {
                            detail: format!("positive label {p:?} missing from instruction"),
                        });
                    }
                }
                for l in &listed {
                    let known = self.positive_labels.iter().any(|p| p == l)
                        || self.negative_labels.iter().any(|n| n == l);
                    if !known {
                        return Err(CurationError::Malformed {
                            detail: format!("instruction label {l:?} is neither positive nor negative"),
                        });
                    }
                }
            }
            TaskKind::SentenceBased => {
                if self.task_description != SENTENCE_TASK_DESCRIPTION {
                    return Err(CurationError::Malformed {
                        detail: "sentence-based task description mismatch".into(),
                    });
                }
                if self.instruction.trim().is_empty() {
                    return Err(CurationError::Malformed { detail: "empty instruction".into() });
                }
            }
        }
        Ok(())
    }
}

/// Renders the response template around one caption. A single trailing
/// period on the caption is absorbed so the template's own period never
/// doubles up.
pub fn render_response(caption: &str) -> String {
    let caption = caption.trim().trim_end_matches('.');
    format!("{caption}. The perception result is {SUMMARY_TOKEN}")
}

/// Combines all positives with negatives sampled (without replacement) from
/// `negative_pool` up to `budget_labels` total labels, then shuffles.
pub fn shuffle_and_sample(
    positives: &[String],
    negative_pool: &[String],
    budget_labels: usize,
    rng_seed: u64,
) -> Result<Vec<String>, CurationError> {
    if budget_labels < positives.len() {
        return Err(CurationError::BudgetTooSmall {
            budget: budget_labels,
            positives: positives.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let pool: Vec<&String> =
        negative_pool.iter().filter(|n| !positives.contains(n)).collect();
    let want = (budget_labels - positives.len()).min(pool.len());
    let negatives: Vec<String> =
        pool.choose_multiple(&mut rng, want).map(|s| (*s).clone()).collect();

    let mut labels: Vec<String> = positives.to_vec();
    labels.extend(negatives);
    labels.shuffle(&mut rng);
    Ok(labels)
}

fn pick_caption(img: &LabeledImage, rng: &mut ChaCha8Rng) -> Result<String, CurationError> {
    let caps = img.captions();
    if caps.is_empty() {
        return Err(CurationError::NoAcceptedCaption { image_ref: img.id.clone() });
    }
    Ok(caps[rng.gen_range(0..caps.len())].clone())
}

/// Builds a word-based sample. `vocab` maps category id -> label text and
/// doubles as the negative pool; targets are relabeled with their vocabulary
/// phrase so downstream stages match purely on instruction labels.
pub fn build_word_sample(
    img: &LabeledImage,
    vocab: &[String],
    budget_labels: usize,
    rng_seed: u64,
) -> Result<SftSample, CurationError> {
    if vocab.is_empty() {
        return Err(CurationError::EmptyVocab);
    }
    let mut positives: Vec<String> = Vec::new();
    let mut targets: Vec<Annotation> = Vec::new();
    for ann in &img.annotations {
        let name = match ann.label() {
            Label::Category(c) => vocab
                .get(*c as usize)
                .ok_or(CurationError::VocabMissingCategory { category: *c })?
                .clone(),
            Label::Phrase(p) => p.clone(),
        };
        if !positives.contains(&name) {
            positives.push(name.clone());
        }
        targets.push(ann.with_label(Label::Phrase(name)));
    }
    if targets.is_empty() {
        return Err(CurationError::NoUsableTargets { image_ref: img.id.clone() });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let caption = pick_caption(img, &mut rng)?;
    let labels = shuffle_and_sample(&positives, vocab, budget_labels, rng.gen())?;
    let negative_labels: Vec<String> =
        labels.iter().filter(|l| !positives.contains(l)).cloned().collect();

    let sample = SftSample {
        task_kind: TaskKind::WordBased,
        task_description: WORD_TASK_DESCRIPTION.to_string(),
        instruction: labels.join(", "),
        response: render_response(&caption),
        image_ref: img.id.clone(),
        targets,
        positive_labels: positives,
        negative_labels,
    };
    sample.validate()?;
    Ok(sample)
}

/// Builds a sentence-based sample: the instruction is the referring
/// expression verbatim (outer whitespace trimmed, interior preserved).
pub fn build_sentence_sample(
    img: &LabeledImage,
    expression: &str,
    target: Annotation,
    rng_seed: u64,
) -> Result<SftSample, CurationError> {
    let instruction = expression.trim().to_string();
    if instruction.is_empty() {
        return Err(CurationError::EmptyExpression);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let caption = pick_caption(img, &mut rng)?;
    let target = target.with_label(Label::Phrase(instruction.clone()));

    let sample = SftSample {
        task_kind: TaskKind::SentenceBased,
        task_description: SENTENCE_TASK_DESCRIPTION.to_string(),
        instruction: instruction.clone(),
        response: render_response(&caption),
        image_ref: img.id.clone(),
        targets: vec![target],
        positive_labels: vec![instruction],
        negative_labels: Vec::new(),
    };
    sample.validate()?;
    Ok(sample)
}

#[cfg(test)]
mod tests {
    use super::*;
    use percept_core::{BinaryMask, RasterImage};

    fn toy_image(categories: &[u32]) -> LabeledImage {
        let raster = RasterImage::filled(8, 8, [10, 20, 30]).unwrap();
        let annotations = categories
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let mask = BinaryMask::from_fn(8, 8, |r, _| r == i).unwrap();
                Annotation::from_mask(Label::Category(c), mask, true).unwrap()
            })
            .collect();
        let mut img = LabeledImage::new("img-0".into(), raster, annotations);
        img.set_captions(vec!["a toy scene with two squares".into()]).unwrap();
        img
    }

    #[test]
    fn response_template_is_exact() {
        assert_eq!(
            render_response("a cat on a mat"),
            "a cat on a mat. The perception result is <PER>"
        );
        // A trailing period on the caption does not double up.
        assert_eq!(
            render_response("a cat on a mat."),
            "a cat on a mat. The perception result is <PER>"
        );
    }

    #[test]
    fn word_sample_lists_all_positives() {
        let img = toy_image(&[0, 1, 2]);
        let vocab: Vec<String> =
            ["apple", "banana", "orange"].iter().map(|s| s.to_string()).collect();
        let s = build_word_sample(&img, &vocab, 3, 0).unwrap();
        let mut listed: Vec<&str> = s.instruction.split(", ").collect();
        listed.sort_unstable();
        assert_eq!(listed, vec!["apple", "banana", "orange"]);
        assert_eq!(s.task_description, WORD_TASK_DESCRIPTION);
        assert_eq!(s.response, "a toy scene with two squares. The perception result is <PER>");
        assert_eq!(s.negative_labels, Vec::<String>::new());
        assert_eq!(s.targets.len(), 3);
        for (t, cat) in s.targets.iter().zip([0usize, 1, 2]) {
            assert_eq!(t.label(), &Label::Phrase(vocab[cat].clone()));
        }
    }

    #[test]
    fn single_positive_zero_negatives_is_that_word() {
        let img = toy_image(&[1]);
        let vocab: Vec<String> = ["apple", "banana"].iter().map(|s| s.to_string()).collect();
        let s = build_word_sample(&img, &vocab, 1, 42).unwrap();
        assert_eq!(s.instruction, "banana");
    }

    #[test]
    fn missing_vocab_entry_is_an_error() {
        let img = toy_image(&[5]);
        let vocab = vec!["apple".to_string()];
        assert!(matches!(
            build_word_sample(&img, &vocab, 4, 0),
            Err(CurationError::VocabMissingCategory { category: 5 })
        ));
    }

    #[test]
    fn empty_vocab_rejected() {
        let img = toy_image(&[0]);
        assert!(matches!(build_word_sample(&img, &[], 4, 0), Err(CurationError::EmptyVocab)));
    }

    #[test]
    fn missing_caption_is_reported() {
        let raster = RasterImage::filled(4, 4, [0, 0, 0]).unwrap();
        let mask = BinaryMask::from_fn(4, 4, |r, _| r == 0).unwrap();
        let ann = Annotation::from_mask(Label::Category(0), mask, true).unwrap();
        let img = LabeledImage::new("bare".into(), raster, vec![ann]);
        assert!(matches!(
            build_word_sample(&img, &["x".to_string()], 1, 0),
            Err(CurationError::NoAcceptedCaption { .. })
        ));
    }

    #[test]
    fn sentence_instruction_is_verbatim_with_outer_trim() {
        let img = toy_image(&[0]);
        let target = img.annotations[0].clone();
        let s = build_sentence_sample(&img, "  the red  apple \n", target, 0).unwrap();
        assert_eq!(s.instruction, "the red  apple");
        assert_eq!(s.task_description, SENTENCE_TASK_DESCRIPTION);
        assert_eq!(s.targets.len(), 1);
        assert_eq!(s.targets[0].label(), &Label::Phrase("the red  apple".into()));
        assert_eq!(s.response.matches(SUMMARY_TOKEN).count(), 1);
    }

    #[test]
    fn empty_expression_rejected() {
        let img = toy_image(&[0]);
        let target = img.annotations[0].clone();
        assert!(matches!(
            build_sentence_sample(&img, "   ", target, 0),
            Err(CurationError::EmptyExpression)
        ));
    }

    #[test]
    fn budget_below_positive_count_rejected() {
        let positives: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        assert!(matches!(
            shuffle_and_sample(&positives, &[], 2, 0),
            Err(CurationError::BudgetTooSmall { budget: 2, positives: 3 })
        ));
    }

    #[test]
    fn budget_equal_positives_is_a_permutation() {
        let positives: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let out = shuffle_and_sample(&positives, &[], 3, 9).unwrap();
        let mut sorted = out.clone();
        sorted.sort();
        assert_eq!(sorted, positives);
    }

    #[test]
    fn validation_catches_doubled_token() {
        let img = toy_image(&[0]);
        let vocab = vec!["apple".to_string()];
        let mut s = build_word_sample(&img, &vocab, 1, 0).unwrap();
        s.response = format!("{} {}", s.response, SUMMARY_TOKEN);
        assert!(matches!(s.validate(), Err(CurationError::Malformed { .. })));
    }
}
