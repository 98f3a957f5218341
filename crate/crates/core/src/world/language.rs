//! Template referring expressions over a closed vocabulary.
//!
//! A sentence names the target class and, when the class is not unique in
//! the scene, a spatial relation that singles the target out among its
//! same-class distractors. The relation is evaluated on true geometry.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::scene::{PointCloudScene, CLASSES};
use super::WorldError;
use crate::geometry::dist;

pub const PAD_ID: u32 = 0;
pub const MASK_ID: u32 = 1;
/// Longest sentence the encoders accept.
pub const T_MAX: usize = 12;

/// Positional and distance relations need this clearance (meters) to count.
const MARGIN: f64 = 0.15;
/// Size superlatives need this volume ratio.
const SIZE_RATIO: f64 = 1.15;
const P_ANAPHORA: f64 = 0.5;

const WORDS: [&str; 22] = [
    "the", ".", "it", "closest", "to", "farthest", "from", "left", "of", "right", "in", "front", "behind",
    "largest", "smallest", "leftmost", "rightmost", "frontmost", "backmost", "with", "near", "and",
];

/// Token ↔ id table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: BTreeMap<String, u32>,
}

impl Vocab {
    /// The built-in vocabulary: specials, template words, class names.
    pub fn builtin() -> Self {
        let mut tokens: Vec<String> = vec!["<pad>".into(), "<mask>".into()];
        tokens.extend(WORDS.iter().map(|w| w.to_string()));
        tokens.extend(CLASSES.iter().map(|c| c.name.to_string()));
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self { tokens, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>, WorldError> {
        text.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| WorldError::UnknownToken(w.to_string())))
            .collect()
    }

    pub fn render(&self, ids: &[u32]) -> String {
        ids.iter().map(|i| self.token(*i).unwrap_or("<unk>")).collect::<Vec<_>>().join(" ")
    }

    /// One `token id` pair per line.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        for (i, t) in self.tokens.iter().enumerate() {
            writeln!(w, "{t} {i}")?;
        }
        Ok(())
    }

    pub fn read_from(r: impl BufRead) -> Result<Self, WorldError> {
        let mut pairs = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let (Some(tok), Some(id), None) = (it.next(), it.next(), it.next()) else {
                return Err(WorldError::BadVocab(format!("line {}: expected `token id`", lineno + 1)));
            };
            let id: u32 = id.parse().map_err(|_| WorldError::BadVocab(format!("line {}: bad id", lineno + 1)))?;
            pairs.push((id, tok.to_string()));
        }
        pairs.sort();
        if pairs.iter().enumerate().any(|(i, (id, _))| *id as usize != i) {
            return Err(WorldError::BadVocab("ids must be dense and start at 0".into()));
        }
        Ok(Self::from_tokens(pairs.into_iter().map(|(_, t)| t).collect()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Relation {
    ClosestTo,
    FarthestFrom,
    LeftOf,
    RightOf,
    InFrontOf,
    Behind,
    Largest,
    Smallest,
    Leftmost,
    Rightmost,
    Frontmost,
    Backmost,
}

impl Relation {
    pub const ANCHORED: [Relation; 6] =
        [Self::ClosestTo, Self::FarthestFrom, Self::LeftOf, Self::RightOf, Self::InFrontOf, Self::Behind];
    pub const SUPERLATIVE: [Relation; 6] =
        [Self::Largest, Self::Smallest, Self::Leftmost, Self::Rightmost, Self::Frontmost, Self::Backmost];

    pub fn words(self) -> &'static str {
        match self {
            Self::ClosestTo => "closest to",
            Self::FarthestFrom => "farthest from",
            Self::LeftOf => "left of",
            Self::RightOf => "right of",
            Self::InFrontOf => "in front of",
            Self::Behind => "behind",
            Self::Largest => "largest",
            Self::Smallest => "smallest",
            Self::Leftmost => "leftmost",
            Self::Rightmost => "rightmost",
            Self::Frontmost => "frontmost",
            Self::Backmost => "backmost",
        }
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.words())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Anchor {
    Object(usize),
    /// The previous sentence's target, rendered as "it".
    Previous(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Description {
    Plain,
    Relational { relation: Relation, anchor: Anchor },
    Superlative(Relation),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sentence {
    pub tokens: Vec<u32>,
    pub target: usize,
    pub text: String,
    pub description: Description,
    /// The description does not single the target out.
    pub ambiguous: bool,
}

/// Does an anchored relation hold for `obj` (`Some(true)`), clearly fail
/// (`Some(false)`), or sit inside the margin (`None`)?
fn anchored_holds(scene: &PointCloudScene, rel: Relation, obj: usize, anchor: usize) -> Option<bool> {
    let o = scene.objects[obj].bbox.center;
    let a = scene.objects[anchor].bbox.center;
    let side = |delta: f64| {
        if delta > MARGIN {
            Some(true)
        } else if delta < -MARGIN {
            Some(false)
        } else {
            None
        }
    };
    match rel {
        Relation::LeftOf => side(a[0] - o[0]),
        Relation::RightOf => side(o[0] - a[0]),
        Relation::InFrontOf => side(a[1] - o[1]),
        Relation::Behind => side(o[1] - a[1]),
        _ => unreachable!("not a pairwise relation"),
    }
}

/// Brute-force check that `rel` (with optional anchor) picks out `target`
/// and no member of `distractors`.
pub fn relation_identifies(
    scene: &PointCloudScene,
    rel: Relation,
    anchor: Option<usize>,
    target: usize,
    distractors: &[usize],
) -> bool {
    let centers = scene.centers();
    let vol = |i: usize| scene.objects[i].bbox.volume();
    match (rel, anchor) {
        (Relation::ClosestTo, Some(a)) => {
            let dt = dist(&centers[target], &centers[a]);
            distractors.iter().all(|&d| dist(&centers[d], &centers[a]) > dt + MARGIN)
        }
        (Relation::FarthestFrom, Some(a)) => {
            let dt = dist(&centers[target], &centers[a]);
            distractors.iter().all(|&d| dist(&centers[d], &centers[a]) < dt - MARGIN)
        }
        (Relation::LeftOf | Relation::RightOf | Relation::InFrontOf | Relation::Behind, Some(a)) => {
            anchored_holds(scene, rel, target, a) == Some(true)
                && distractors.iter().all(|&d| anchored_holds(scene, rel, d, a) == Some(false))
        }
        (Relation::Largest, None) => distractors.iter().all(|&d| vol(target) > vol(d) * SIZE_RATIO),
        (Relation::Smallest, None) => distractors.iter().all(|&d| vol(target) * SIZE_RATIO < vol(d)),
        (Relation::Leftmost, None) => distractors.iter().all(|&d| centers[target][0] + MARGIN < centers[d][0]),
        (Relation::Rightmost, None) => distractors.iter().all(|&d| centers[target][0] > centers[d][0] + MARGIN),
        (Relation::Frontmost, None) => distractors.iter().all(|&d| centers[target][1] + MARGIN < centers[d][1]),
        (Relation::Backmost, None) => distractors.iter().all(|&d| centers[target][1] > centers[d][1] + MARGIN),
        _ => false,
    }
}

fn render(scene: &PointCloudScene, target: usize, desc: &Description) -> String {
    let class = CLASSES[scene.objects[target].class_id].name;
    match desc {
        Description::Plain => format!("the {class} ."),
        Description::Superlative(rel) => format!("the {rel} {class} ."),
        Description::Relational { relation, anchor: Anchor::Previous(_) } => format!("the {class} {relation} it ."),
        Description::Relational { relation, anchor: Anchor::Object(a) } => {
            format!("the {class} {relation} the {} .", CLASSES[scene.objects[*a].class_id].name)
        }
    }
}

/// Describes `target`, optionally relative to the previous sentence's
/// target. Selection order: plain (unique class), anaphoric relation
/// (with probability 0.5 when a previous target exists), relation to a
/// unique-class anchor (nearest anchor first), superlative, and finally an
/// ambiguous "closest to" fallback.
pub fn generate_sentence<R: Rng + ?Sized>(
    scene: &PointCloudScene,
    target: usize,
    previous: Option<usize>,
    vocab: &Vocab,
    rng: &mut R,
) -> Result<Sentence, WorldError> {
    if target >= scene.objects.len() {
        return Err(WorldError::TargetOutOfRange(target));
    }
    let class = scene.objects[target].class_id;
    let distractors_excluding = |skip: Option<usize>| -> Vec<usize> {
        (0..scene.objects.len())
            .filter(|&i| i != target && Some(i) != skip && scene.objects[i].class_id == class)
            .collect()
    };
    let mut chosen: Option<Description> = None;
    let mut ambiguous = false;

    if distractors_excluding(None).is_empty() {
        chosen = Some(Description::Plain);
    }
    // Draw the coin unconditionally so the stream does not depend on
    // which branch ends up taken.
    let try_anaphora = rng.gen_bool(P_ANAPHORA);
    if chosen.is_none() && try_anaphora {
        if let Some(prev) = previous.filter(|p| *p != target) {
            let distractors = distractors_excluding(Some(prev));
            if distractors.is_empty() {
                chosen = Some(Description::Relational { relation: Relation::ClosestTo, anchor: Anchor::Previous(prev) });
            } else if let Some(rel) =
                Relation::ANCHORED.into_iter().find(|r| relation_identifies(scene, *r, Some(prev), target, &distractors))
            {
                chosen = Some(Description::Relational { relation: rel, anchor: Anchor::Previous(prev) });
            }
        }
    }
    if chosen.is_none() {
        let distractors = distractors_excluding(None);
        let centers = scene.centers();
        let mut anchors: Vec<usize> = (0..scene.objects.len())
            .filter(|&a| scene.objects[a].class_id != class && scene.class_count(scene.objects[a].class_id) == 1)
            .collect();
        anchors.sort_by(|a, b| {
            dist(&centers[*a], &centers[target]).total_cmp(&dist(&centers[*b], &centers[target])).then(a.cmp(b))
        });
        'outer: for a in anchors {
            for rel in Relation::ANCHORED {
                if relation_identifies(scene, rel, Some(a), target, &distractors) {
                    chosen = Some(Description::Relational { relation: rel, anchor: Anchor::Object(a) });
                    break 'outer;
                }
            }
        }
        if chosen.is_none() {
            chosen = Relation::SUPERLATIVE
                .into_iter()
                .find(|r| relation_identifies(scene, *r, None, target, &distractors))
                .map(Description::Superlative);
        }
        if chosen.is_none() {
            ambiguous = true;
            let nearest_other = (0..scene.objects.len())
                .filter(|&i| scene.objects[i].class_id != class)
                .min_by(|a, b| {
                    dist(&centers[*a], &centers[target]).total_cmp(&dist(&centers[*b], &centers[target]))
                });
            chosen = Some(match nearest_other {
                Some(a) => Description::Relational { relation: Relation::ClosestTo, anchor: Anchor::Object(a) },
                None => Description::Plain,
            });
        }
    }
    let description = chosen.expect("a description is always chosen");
    let text = render(scene, target, &description);
    let tokens = vocab.tokenize(&text)?;
    debug_assert!(tokens.len() <= T_MAX);
    Ok(Sentence { tokens, target, text, description, ambiguous })
}
