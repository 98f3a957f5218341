//! Dense paragraph samples: a focus object, its nearest neighbours, one
//! sentence per object, ordered so objects near the focus tend to come
//! first.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::language::{generate_sentence, Sentence, Vocab, T_MAX};
use super::scene::PointCloudScene;
use super::WorldError;
use crate::geometry::{dist, k_nearest_objects};

/// Slots per paragraph; shorter paragraphs are zero-padded.
pub const K_MAX: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseSample {
    /// Index of the scene within its dataset.
    pub scene: usize,
    pub focus: usize,
    /// Always `K_MAX` slots; the first `k` are real.
    pub sentences: Vec<Sentence>,
    pub valid: Vec<bool>,
}

impl DenseSample {
    pub fn k(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn valid_sentences(&self) -> impl Iterator<Item = &Sentence> {
        self.sentences.iter().zip(&self.valid).filter(|(_, v)| **v).map(|(s, _)| s)
    }

    pub fn targets(&self) -> Vec<usize> {
        self.valid_sentences().map(|s| s.target).collect()
    }
}

pub fn padding_sentence() -> Sentence {
    Sentence {
        tokens: vec![0; T_MAX],
        target: 0,
        text: String::new(),
        description: super::language::Description::Plain,
        ambiguous: false,
    }
}

/// Successive weighted draws without replacement; weight of item `i` is
/// `exp(-d_i / sigma)`.
pub fn proximity_order<R: Rng + ?Sized>(distances: &[f64], sigma: f64, rng: &mut R) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..distances.len()).collect();
    let mut order = Vec::with_capacity(distances.len());
    while !remaining.is_empty() {
        let weights: Vec<f64> = remaining.iter().map(|&i| (-distances[i] / sigma).exp()).collect();
        let total: f64 = weights.iter().sum();
        let mut u = rng.gen::<f64>() * total;
        let mut pick = remaining.len() - 1;
        for (j, w) in weights.iter().enumerate() {
            if u < *w {
                pick = j;
                break;
            }
            u -= w;
        }
        order.push(remaining.remove(pick));
    }
    order
}

/// Samples one paragraph of `k` sentences (clamped to the object count).
/// `sigma` controls how strongly the order favours objects near the focus.
pub fn sample_paragraph<R: Rng + ?Sized>(
    scene: &PointCloudScene,
    scene_index: usize,
    k: usize,
    sigma: f64,
    vocab: &Vocab,
    rng: &mut R,
) -> Result<DenseSample, WorldError> {
    let k = k.min(scene.objects.len()).min(K_MAX);
    if k < 2 {
        return Err(WorldError::ParagraphTooShort { objects: scene.objects.len() });
    }
    let focus = rng.gen_range(0..scene.objects.len());
    sample_paragraph_with_focus(scene, scene_index, focus, k, sigma, vocab, rng)
}

pub fn sample_paragraph_with_focus<R: Rng + ?Sized>(
    scene: &PointCloudScene,
    scene_index: usize,
    focus: usize,
    k: usize,
    sigma: f64,
    vocab: &Vocab,
    rng: &mut R,
) -> Result<DenseSample, WorldError> {
    let centers = scene.centers();
    let k = k.min(scene.objects.len()).min(K_MAX);
    if k < 2 {
        return Err(WorldError::ParagraphTooShort { objects: scene.objects.len() });
    }
    let mut concerned = vec![focus];
    concerned.extend(k_nearest_objects(&centers, focus, k - 1)?);
    let distances: Vec<f64> = concerned.iter().map(|&o| dist(&centers[o], &centers[focus])).collect();
    let order = proximity_order(&distances, sigma, rng);
    let mut sentences = Vec::with_capacity(K_MAX);
    let mut previous = None;
    for &i in &order {
        let target = concerned[i];
        sentences.push(generate_sentence(scene, target, previous, vocab, rng)?);
        previous = Some(target);
    }
    let mut valid = vec![true; k];
    sentences.resize_with(K_MAX, padding_sentence);
    valid.resize(K_MAX, false);
    Ok(DenseSample { scene: scene_index, focus, sentences, valid })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitTag {
    Unique,
    Multiple,
}

/// Per valid sentence: unique iff the target's class has no other
/// instance in the scene.
pub fn split_tags(scenes: &[PointCloudScene], samples: &[DenseSample]) -> Vec<Vec<SplitTag>> {
    samples
        .iter()
        .map(|s| {
            let scene = &scenes[s.scene];
            s.valid_sentences()
                .map(|sent| {
                    if scene.class_count(scene.objects[sent.target].class_id) == 1 {
                        SplitTag::Unique
                    } else {
                        SplitTag::Multiple
                    }
                })
                .collect()
        })
        .collect()
}
