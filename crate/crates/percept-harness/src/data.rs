//! Desk-scale data assembly: the synthetic benchmark and alignment corpus,
//! the tokenizer built over every string the run can see, and the per-source
//! builders that turn scenes into unified training samples.

use crate::config::Source;
use crate::HarnessError;
use percept_core::{Label, LabeledImage};
use percept_curation::{build_sentence_sample, build_word_sample, render_response, SftSample};
use percept_metrics::synth::{category_table, FIRST_THING_CATEGORY, ThingInfo};
use percept_metrics::{synth_generate, SynthDataset, SynthSpec, THING_COLORS, THING_SHAPES};
use percept_model::{Granularity, Tokenizer};
use percept_objective::TargetInstance;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Task description for stage-1 caption alignment.
pub const STAGE1_TASK_DESCRIPTION: &str = "Describe the picture.";

/// Labels per word-based instruction (positives plus sampled negatives).
pub const LABEL_BUDGET: usize = 6;

/// Images in the stage-1 alignment set; with four captions each this yields
/// the 200-caption alignment corpus.
pub const ALIGN_IMAGES: usize = 50;

/// Which generated dataset an image lives in (also the encoder-cache key
/// namespace).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    /// The 16-image benchmark: stage-2 training and all evaluation.
    Bench,
    /// The 50-image caption-alignment set: stage 1 only.
    Align,
}

/// Everything a run needs: both datasets, the tokenizer covering them, and
/// the label vocabularies.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub bench: SynthDataset,
    pub align: SynthDataset,
    pub tokenizer: Tokenizer,
    /// Category names in category-id order (stuff first, then things).
    pub category_names: Vec<String>,
    /// All "color shape" phrases; the grounding-source label pool.
    pub phrase_vocab: Vec<String>,
}

impl Corpus {
    pub fn image(&self, split: Split, index: usize) -> &percept_metrics::SynthImage {
        match split {
            Split::Bench => &self.bench.images[index],
            Split::Align => &self.align.images[index],
        }
    }
}

/// Generates both datasets at `image_size` and builds the tokenizer over
/// every string a run can encounter (task descriptions, captions through the
/// response template, category names, phrases, referring expressions).
pub fn build_corpus(image_size: usize, bench_images: usize, seed: u64) -> Result<Corpus, HarnessError> {
    let bench = synth_generate(&SynthSpec {
        image_size,
        num_images: bench_images,
        max_things: 4,
        relation_fraction: 0.3,
        expressions_per_image: 2,
        seed,
    })?;
    // Distinct stream: xor keeps the alignment scenes independent of the
    // benchmark for every base seed.
    let align = synth_generate(&SynthSpec {
        image_size,
        num_images: ALIGN_IMAGES,
        max_things: 4,
        relation_fraction: 0.3,
        expressions_per_image: 1,
        seed: seed ^ 0x00A1_16B5_0C0F_FEE5,
    })?;

    let category_names: Vec<String> = category_table().into_iter().map(|c| c.name).collect();
    let mut phrase_vocab = Vec::new();
    for color in THING_COLORS {
        for shape in THING_SHAPES {
            phrase_vocab.push(format!("{color} {shape}"));
        }
    }

    let mut texts: Vec<String> = vec![
        percept_curation::WORD_TASK_DESCRIPTION.to_string(),
        percept_curation::SENTENCE_TASK_DESCRIPTION.to_string(),
        STAGE1_TASK_DESCRIPTION.to_string(),
        render_response("coverage"),
    ];
    texts.extend(category_names.iter().cloned());
    texts.extend(phrase_vocab.iter().cloned());
    for ds in [&bench, &align] {
        for img in &ds.images {
            texts.extend(img.labeled.captions().iter().cloned());
            texts.extend(img.referring.iter().map(|e| e.text.clone()));
        }
    }
    let tokenizer = Tokenizer::build(texts.iter().map(String::as_str));

    Ok(Corpus { bench, align, tokenizer, category_names, phrase_vocab })
}

/// A stage-1 draw: one caption of one alignment image, rendered through the
/// unified response template.
#[derive(Debug, Clone)]
pub struct CaptionSample {
    pub split: Split,
    pub image_index: usize,
    pub response: String,
}

/// Uniform draw over (image, caption) pairs of the alignment set.
pub fn stage1_sample(corpus: &Corpus, rng: &mut ChaCha8Rng) -> Result<CaptionSample, HarnessError> {
    if corpus.align.images.is_empty() {
        return Err(HarnessError::EmptyDataset("alignment images"));
    }
    let image_index = rng.gen_range(0..corpus.align.images.len());
    let captions = corpus.align.images[image_index].labeled.captions();
    if captions.is_empty() {
        return Err(HarnessError::EmptyDataset("captions"));
    }
    let caption = &captions[rng.gen_range(0..captions.len())];
    Ok(CaptionSample { split: Split::Align, image_index, response: render_response(caption) })
}

/// One stage-2 training sample: the unified record plus the decoding switches
/// its source implies.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub sft: SftSample,
    pub split: Split,
    pub image_index: usize,
    pub granularity: Granularity,
    /// Whether the decoder appends the learnable stuff queries.
    pub include_stuff: bool,
    /// Box-only sources (detection, grounding) drop mask supervision.
    pub with_masks: bool,
}

/// Builds one sample from the benchmark for a stage-2 source.
///
/// - panoptic: word-based over the category names, stuff and masks included;
/// - detection: word-based over the category names, things only, boxes only;
/// - grounding: word-based over "color shape" phrases, things only, boxes only;
/// - referring: sentence-based on one referring expression, mask included.
pub fn stage2_sample(
    corpus: &Corpus,
    source: Source,
    rng: &mut ChaCha8Rng,
) -> Result<TrainSample, HarnessError> {
    if corpus.bench.images.is_empty() {
        return Err(HarnessError::EmptyDataset("benchmark images"));
    }
    let image_index = rng.gen_range(0..corpus.bench.images.len());
    let img = &corpus.bench.images[image_index];
    let common = |sft: SftSample, granularity, include_stuff, with_masks| TrainSample {
        sft,
        split: Split::Bench,
        image_index,
        granularity,
        include_stuff,
        with_masks,
    };
    match source {
        Source::Captions => Err(HarnessError::BadSource { stage: 2, source }),
        Source::Panoptic => {
            let sft = build_word_sample(&img.labeled, &corpus.category_names, LABEL_BUDGET, rng.gen())?;
            Ok(common(sft, Granularity::WordBased, true, true))
        }
        Source::Detection => {
            let view = thing_view(&img.labeled);
            let sft = build_word_sample(&view, &corpus.category_names, LABEL_BUDGET, rng.gen())?;
            Ok(common(sft, Granularity::WordBased, false, false))
        }
        Source::Grounding => {
            let view = phrase_view(&img.labeled, &img.things);
            let sft = build_word_sample(&view, &corpus.phrase_vocab, LABEL_BUDGET, rng.gen())?;
            Ok(common(sft, Granularity::WordBased, false, false))
        }
        Source::Referring => {
            if img.referring.is_empty() {
                return Err(HarnessError::EmptyDataset("referring expressions"));
            }
            let expr = &img.referring[rng.gen_range(0..img.referring.len())];
            let target = img.labeled.annotations[expr.ann_index].clone();
            let sft = build_sentence_sample(&img.labeled, &expr.text, target, rng.gen())?;
            Ok(common(sft, Granularity::SentenceBased, false, true))
        }
    }
}

/// The label list the prompt carries: the instruction split on ", " for
/// word-based samples, the whole instruction as a single entry otherwise.
pub fn prompt_labels(sample: &TrainSample) -> Vec<String> {
    match sample.granularity {
        Granularity::WordBased => {
            sample.sft.instruction.split(", ").map(str::to_string).collect()
        }
        Granularity::SentenceBased => vec![sample.sft.instruction.clone()],
    }
}

/// Converts the sample's annotations into matching targets: label index =
/// position of the annotation's phrase in the instruction labels, box from
/// the annotation, mask area-averaged onto the supervision grid (box-only
/// sources carry no mask).
pub fn target_instances(
    sample: &TrainSample,
    labels: &[String],
    pixel_side: usize,
) -> Result<Vec<TargetInstance>, HarnessError> {
    sample
        .sft
        .targets
        .iter()
        .map(|ann| {
            let phrase = match ann.label() {
                Label::Phrase(p) => p.clone(),
                Label::Category(c) => {
                    return Err(HarnessError::LabelNotListed { phrase: format!("category {c}") })
                }
            };
            let label = labels
                .iter()
                .position(|l| *l == phrase)
                .ok_or(HarnessError::LabelNotListed { phrase })?;
            let mask = if sample.with_masks {
                Some(ann.mask().area_downsample(pixel_side, pixel_side)?)
            } else {
                None
            };
            Ok(TargetInstance { label, bbox: ann.bbox(), mask })
        })
        .collect()
}

/// The image with only its thing annotations (detection view).
fn thing_view(img: &LabeledImage) -> LabeledImage {
    let anns = img.annotations.iter().filter(|a| a.is_thing()).cloned().collect();
    let mut view = LabeledImage::new(img.id.clone(), img.image.clone(), anns);
    view.set_captions(img.captions().to_vec()).expect("caption count unchanged");
    view
}

/// The image with things relabeled by their "color shape" phrase (grounding
/// view). Thing annotations come first, indexed in step with `things`.
fn phrase_view(img: &LabeledImage, things: &[ThingInfo]) -> LabeledImage {
    let anns = things
        .iter()
        .enumerate()
        .map(|(k, info)| {
            let phrase = format!("{} {}", THING_COLORS[info.color_idx], THING_SHAPES[info.shape_idx]);
            img.annotations[k].with_label(Label::Phrase(phrase))
        })
        .collect();
    let mut view = LabeledImage::new(img.id.clone(), img.image.clone(), anns);
    view.set_captions(img.captions().to_vec()).expect("caption count unchanged");
    view
}

/// Category id for a word-based label index when the instruction lists the
/// canonical category names in id order (the evaluation prompt).
pub fn canonical_category(label_index: usize) -> u32 {
    label_index as u32
}

/// Whether a canonical category id is a thing (instances) rather than stuff.
pub fn is_thing_category(category: u32) -> bool {
    category >= FIRST_THING_CATEGORY
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Source;
    use percept_curation::TaskKind;
    use rand::SeedableRng;

    fn corpus() -> Corpus {
        build_corpus(64, 4, 11).unwrap()
    }

    #[test]
    fn corpus_builds_both_datasets_and_a_covering_tokenizer() {
        let c = corpus();
        assert_eq!(c.bench.images.len(), 4);
        assert_eq!(c.align.images.len(), ALIGN_IMAGES);
        let total_captions: usize =
            c.align.images.iter().map(|i| i.labeled.captions().len()).sum();
        assert_eq!(total_captions, 200, "alignment corpus is 200 captions");
        assert_eq!(c.category_names.len(), 6);
        assert_eq!(c.phrase_vocab.len(), 18);
        // Every caption and expression must tokenize without byte fallback
        // (ids ≥ 260 are whole words; 4..260 are fallback bytes).
        for img in c.bench.images.iter().chain(c.align.images.iter()) {
            for text in img.labeled.captions() {
                let ids = c.tokenizer.encode(text);
                assert!(ids.iter().all(|&i| i >= 260), "caption {text:?} fell back to bytes");
            }
            for e in &img.referring {
                let ids = c.tokenizer.encode(&e.text);
                assert!(ids.iter().all(|&i| i >= 260), "expression {:?} fell back", e.text);
            }
        }
    }

    #[test]
    fn different_seeds_give_different_benchmarks() {
        let a = build_corpus(64, 4, 1).unwrap();
        let b = build_corpus(64, 4, 2).unwrap();
        assert_ne!(
            a.bench.images[0].labeled.image.bytes(),
            b.bench.images[0].labeled.image.bytes()
        );
        let again = build_corpus(64, 4, 1).unwrap();
        assert_eq!(a.bench.images[0].labeled, again.bench.images[0].labeled);
    }

    #[test]
    fn stage1_samples_cover_images_and_render_the_template() {
        let c = corpus();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..300 {
            let s = stage1_sample(&c, &mut rng).unwrap();
            assert_eq!(s.split, Split::Align);
            assert!(s.response.ends_with(". The perception result is <PER>"));
            seen.insert(s.image_index);
        }
        assert!(seen.len() > ALIGN_IMAGES / 2, "draws should spread over the set");
    }

    #[test]
    fn panoptic_samples_list_all_six_categories_and_carry_masks() {
        let c = corpus();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = stage2_sample(&c, Source::Panoptic, &mut rng).unwrap();
        assert_eq!(s.sft.task_kind, TaskKind::WordBased);
        assert!(s.include_stuff && s.with_masks);
        let labels = prompt_labels(&s);
        assert_eq!(labels.len(), LABEL_BUDGET);
        let mut sorted = labels.clone();
        sorted.sort();
        let mut names = c.category_names.clone();
        names.sort();
        assert_eq!(sorted, names, "budget 6 over a 6-name vocab lists every name");
        let targets = target_instances(&s, &labels, 16).unwrap();
        assert_eq!(targets.len(), s.sft.targets.len());
        assert!(targets.iter().all(|t| t.mask.is_some()));
        assert!(targets.iter().all(|t| t.label < labels.len()));
    }

    #[test]
    fn detection_samples_are_things_only_and_box_only() {
        let c = corpus();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = stage2_sample(&c, Source::Detection, &mut rng).unwrap();
        assert!(!s.include_stuff && !s.with_masks);
        let img = &c.bench.images[s.image_index];
        let things = img.labeled.annotations.iter().filter(|a| a.is_thing()).count();
        assert_eq!(s.sft.targets.len(), things);
        let labels = prompt_labels(&s);
        let targets = target_instances(&s, &labels, 16).unwrap();
        assert!(targets.iter().all(|t| t.mask.is_none()));
    }

    #[test]
    fn grounding_samples_use_color_shape_phrases() {
        let c = corpus();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = stage2_sample(&c, Source::Grounding, &mut rng).unwrap();
        for p in &s.sft.positive_labels {
            assert!(c.phrase_vocab.contains(p), "{p:?} is not a color-shape phrase");
        }
        let img = &c.bench.images[s.image_index];
        assert_eq!(s.sft.targets.len(), img.things.len());
        // Every target phrase matches its thing's attributes.
        let labels = prompt_labels(&s);
        let targets = target_instances(&s, &labels, 16).unwrap();
        for (t, info) in targets.iter().zip(&img.things) {
            let expect = format!("{} {}", THING_COLORS[info.color_idx], THING_SHAPES[info.shape_idx]);
            assert_eq!(labels[t.label], expect);
        }
    }

    #[test]
    fn referring_samples_point_at_their_annotation() {
        let c = corpus();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = stage2_sample(&c, Source::Referring, &mut rng).unwrap();
        assert_eq!(s.granularity, Granularity::SentenceBased);
        assert!(s.with_masks && !s.include_stuff);
        assert_eq!(s.sft.targets.len(), 1);
        let labels = prompt_labels(&s);
        assert_eq!(labels, vec![s.sft.instruction.clone()]);
        let targets = target_instances(&s, &labels, 16).unwrap();
        assert_eq!(targets[0].label, 0);
        assert!(targets[0].mask.is_some());
        // The target is the annotation the expression names.
        let img = &c.bench.images[s.image_index];
        let found = img
            .referring
            .iter()
            .any(|e| e.text == s.sft.instruction
                && img.labeled.annotations[e.ann_index].bbox() == s.sft.targets[0].bbox());
        assert!(found, "sample target must be the expression's annotation");
    }

    #[test]
    fn captions_source_is_rejected_in_stage2() {
        let c = corpus();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(matches!(
            stage2_sample(&c, Source::Captions, &mut rng),
            Err(HarnessError::BadSource { stage: 2, source: Source::Captions })
        ));
    }

    #[test]
    fn unlisted_target_phrase_is_an_error() {
        let c = corpus();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = stage2_sample(&c, Source::Panoptic, &mut rng).unwrap();
        let wrong = vec!["nothing".to_string()];
        assert!(matches!(
            target_instances(&s, &wrong, 16),
            Err(HarnessError::LabelNotListed { .. })
        ));
    }

    #[test]
    fn category_helpers_match_the_synthetic_world() {
        assert_eq!(canonical_category(0), 0);
        assert!(!is_thing_category(0) && !is_thing_category(2));
        assert!(is_thing_category(3) && is_thing_category(5));
    }
}
