//! Template grammar for change captions and the closed vocabulary over it.
//!
//! Every non-trivial caption names the changed object, situates it against
//! its nearest other object ("the small brown rubber cube above the red
//! sphere moved"), and ends in the change verb. The referent noun therefore
//! sits between the subject noun and the verb, which is exactly where gold
//! dependency tags (`nsubj` on the subject, `pobj` on the referent, `root`
//! on the verb) disambiguate which object changed.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{footprint, ChangeKind, Color, Material, SceneConfig, SceneObject, ScenePair, Shape, Size};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Dependency tagset of the grammar; index 0 is the padding tag.
pub const TAGS: [&str; 11] = [
    "<pad>",
    "root",
    "nsubj",
    "nsubjpass",
    "auxpass",
    "det",
    "amod",
    "prep",
    "pobj",
    "acomp",
    "punct",
];

const RELATIONS: [&str; 3] = ["above", "below", "beside"];
const FUNCTION_WORDS: [&str; 9] = [
    "the", "a", "changed", "to", "became", "was", "added", "removed", "moved",
];
const NO_CHANGE: [(&str, &str); 4] = [
    ("no", "det"),
    ("change", "nsubjpass"),
    ("was", "auxpass"),
    ("made", "root"),
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionSample {
    /// `<bos> words… <eos>`.
    pub tokens: Vec<usize>,
    /// One tag per token; `<bos>` carries the padding tag, `<eos>` `punct`.
    pub dep_tags: Vec<usize>,
    pub change: ChangeKind,
    pub footprint: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyRepr", into = "VocabularyRepr")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    tags: Vec<String>,
    tag_index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyRepr {
    tokens: Vec<String>,
    tags: Vec<String>,
}

impl TryFrom<VocabularyRepr> for Vocabulary {
    type Error = Error;

    fn try_from(r: VocabularyRepr) -> Result<Self> {
        Vocabulary::from_parts(r.tokens, r.tags)
    }
}

impl From<Vocabulary> for VocabularyRepr {
    fn from(v: Vocabulary) -> Self {
        VocabularyRepr {
            tokens: v.tokens,
            tags: v.tags,
        }
    }
}

fn index_of(items: &[String], what: &str) -> Result<HashMap<String, usize>> {
    let mut map = HashMap::with_capacity(items.len());
    for (i, t) in items.iter().enumerate() {
        if map.insert(t.clone(), i).is_some() {
            return Err(Error::invalid(format!("duplicate {what} `{t}`")));
        }
    }
    Ok(map)
}

impl Vocabulary {
    pub fn from_parts(tokens: Vec<String>, tags: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens.iter().zip(SPECIALS).any(|(t, s)| t != s) {
            return Err(Error::invalid("vocabulary must start with the special tokens"));
        }
        if tags.first().map(String::as_str) != Some(TAGS[0]) {
            return Err(Error::invalid("tagset must start with the padding tag"));
        }
        Ok(Vocabulary {
            index: index_of(&tokens, "token")?,
            tag_index: index_of(&tags, "tag")?,
            tokens,
            tags,
        })
    }

    /// Vocabulary closed over the caption grammar.
    pub fn grammar() -> Self {
        build_vocabulary(&grammar_corpus()).expect("grammar corpus is non-empty")
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn tagset_size(&self) -> usize {
        self.tags.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn tag_id(&self, tag: &str) -> Option<usize> {
        self.tag_index.get(tag).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(SPECIALS[UNK])
    }

    pub fn tag(&self, id: usize) -> &str {
        self.tags.get(id).map(String::as_str).unwrap_or(TAGS[0])
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<usize>> {
        words
            .iter()
            .map(|w| {
                self.id(w.as_ref())
                    .ok_or_else(|| Error::UnknownToken(w.as_ref().to_string()))
            })
            .collect()
    }

    /// Words of a token sequence with the special tokens dropped.
    pub fn decode(&self, ids: &[usize]) -> Vec<&str> {
        ids.iter()
            .filter(|&&i| i >= SPECIALS.len())
            .map(|&i| self.token(i))
            .collect()
    }
}

/// Orders tokens by descending frequency, ties broken lexicographically,
/// after the four special tokens. The tagset is the grammar's fixed one.
pub fn build_vocabulary<S: AsRef<str>>(corpus: &[Vec<S>]) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::invalid("cannot build a vocabulary from an empty corpus"));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for sentence in corpus {
        for w in sentence {
            let w = w.as_ref();
            if !SPECIALS.contains(&w) {
                *counts.entry(w).or_default() += 1;
            }
        }
    }
    let mut words: Vec<(&str, usize)> = counts.into_iter().collect();
    words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let tokens = SPECIALS
        .iter()
        .map(|s| s.to_string())
        .chain(words.into_iter().map(|(w, _)| w.to_string()))
        .collect();
    Vocabulary::from_parts(tokens, TAGS.iter().map(|t| t.to_string()).collect())
}

/// A corpus covering every word the grammar can emit.
pub fn grammar_corpus() -> Vec<Vec<String>> {
    let own = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    vec![
        own(&NO_CHANGE.map(|w| w.0)),
        own(&FUNCTION_WORDS),
        own(&RELATIONS),
        own(&Size::ALL.map(Size::word)),
        own(&Color::ALL.map(Color::word)),
        own(&Material::ALL.map(Material::word)),
        own(&Shape::ALL.map(Shape::word)),
    ]
}

/// Nearest other object by squared grid distance; ties go to the lower id.
fn referent<'a>(target: &SceneObject, scene: &'a [SceneObject]) -> Option<&'a SceneObject> {
    scene.iter().filter(|o| o.id != target.id).min_by_key(|o| {
        let d = (o.row as i64 - target.row as i64).pow(2) + (o.col as i64 - target.col as i64).pow(2);
        (d, o.id)
    })
}

fn relation(target: &SceneObject, other: &SceneObject) -> &'static str {
    let dr = other.row as i64 - target.row as i64;
    let dc = other.col as i64 - target.col as i64;
    if dr.abs() >= dc.abs() && dr != 0 {
        if dr > 0 {
            "above"
        } else {
            "below"
        }
    } else {
        "beside"
    }
}

/// The caption as `(word, dependency tag)` pairs, without `<bos>`/`<eos>`.
pub fn realize_words(pair: &ScenePair) -> Vec<(&'static str, &'static str)> {
    let kind = pair.change.kind;
    let (target, scene) = match kind {
        ChangeKind::None => return NO_CHANGE.to_vec(),
        ChangeKind::Add => (pair.change.after, &pair.after),
        _ => (pair.change.before, &pair.before),
    };
    let target = target.expect("changed object recorded");
    let subject_tag = match kind {
        ChangeKind::Add | ChangeKind::Drop => "nsubjpass",
        _ => "nsubj",
    };
    let mut out = vec![
        (if kind == ChangeKind::Add { "a" } else { "the" }, "det"),
        (target.size.word(), "amod"),
        (target.color.word(), "amod"),
        (target.material.word(), "amod"),
        (target.shape.word(), subject_tag),
    ];
    if let Some(r) = referent(&target, scene) {
        out.extend([
            (relation(&target, r), "prep"),
            ("the", "det"),
            (r.color.word(), "amod"),
            (r.shape.word(), "pobj"),
        ]);
    }
    match kind {
        ChangeKind::Color => {
            let new = pair.change.after.expect("recolored object");
            out.extend([("changed", "root"), ("to", "prep"), (new.color.word(), "pobj")]);
        }
        ChangeKind::Texture => {
            let new = pair.change.after.expect("retextured object");
            out.extend([("became", "root"), (new.material.word(), "acomp")]);
        }
        ChangeKind::Add => out.extend([("was", "auxpass"), ("added", "root")]),
        ChangeKind::Drop => out.extend([("was", "auxpass"), ("removed", "root")]),
        ChangeKind::Move => out.push(("moved", "root")),
        ChangeKind::None => unreachable!(),
    }
    out
}

pub fn realize_caption(pair: &ScenePair, vocab: &Vocabulary, config: &SceneConfig) -> Result<CaptionSample> {
    let words = realize_words(pair);
    let mut tokens = vec![BOS];
    let mut dep_tags = vec![0];
    for (w, t) in words {
        tokens.push(vocab.id(w).ok_or_else(|| Error::UnknownToken(w.to_string()))?);
        dep_tags.push(
            vocab
                .tag_id(t)
                .ok_or_else(|| Error::invalid(format!("unknown tag `{t}`")))?,
        );
    }
    tokens.push(EOS);
    dep_tags.push(vocab.tag_id("punct").expect("punct in tagset"));
    Ok(CaptionSample {
        tokens,
        dep_tags,
        change: pair.change.kind,
        footprint: footprint(pair, config),
    })
}

#[cfg(test)]
mod tests {
    use super::super::{sample_rng, sample_scene_pair, Change, Jitter};
    use super::*;

    fn obj(id: u32, row: usize, col: usize, color: Color, shape: Shape) -> SceneObject {
        SceneObject {
            id,
            shape,
            color,
            material: Material::Rubber,
            size: Size::Small,
            row,
            col,
        }
    }

    #[test]
    fn no_change_sentence() {
        let p = ScenePair {
            before: vec![],
            after: vec![],
            change: Change {
                kind: ChangeKind::None,
                object: None,
                before: None,
                after: None,
            },
            jitter: Jitter::none(),
        };
        let v = Vocabulary::grammar();
        let c = realize_caption(&p, &v, &SceneConfig::default()).unwrap();
        assert_eq!(v.decode(&c.tokens), vec!["no", "change", "was", "made"]);
        let tags: Vec<&str> = c.dep_tags.iter().map(|&t| v.tag(t)).collect();
        assert_eq!(tags, vec!["<pad>", "det", "nsubjpass", "auxpass", "root", "punct"]);
        assert!(c.footprint.is_empty());
    }

    #[test]
    fn move_of_small_brown_cube() {
        let cube = obj(0, 2, 2, Color::Brown, Shape::Cube);
        let sphere = obj(1, 4, 2, Color::Red, Shape::Sphere);
        let far = obj(2, 5, 5, Color::Blue, Shape::Cylinder);
        let moved = SceneObject { row: 2, col: 5, ..cube };
        let p = ScenePair {
            before: vec![cube, sphere, far],
            after: vec![moved, sphere, far],
            change: Change {
                kind: ChangeKind::Move,
                object: Some(0),
                before: Some(cube),
                after: Some(moved),
            },
            jitter: Jitter::none(),
        };
        let v = Vocabulary::grammar();
        let c = realize_caption(&p, &v, &SceneConfig::default()).unwrap();
        let words = v.decode(&c.tokens);
        assert_eq!(
            words,
            vec!["the", "small", "brown", "rubber", "cube", "above", "the", "red", "sphere", "moved"]
        );
        let tag_of = |w: &str| {
            let i = c.tokens.iter().position(|&t| v.token(t) == w).unwrap();
            v.tag(c.dep_tags[i]).to_string()
        };
        assert_eq!(tag_of("cube"), "nsubj");
        assert_eq!(tag_of("moved"), "root");
        assert_eq!(tag_of("sphere"), "pobj");
    }

    #[test]
    fn tokens_and_tags_align() {
        let cfg = SceneConfig::default();
        let v = Vocabulary::grammar();
        for i in 0..1000 {
            let p = sample_scene_pair(&mut sample_rng(2, i), &cfg).unwrap();
            let c = realize_caption(&p, &v, &cfg).unwrap();
            assert_eq!(c.tokens.len(), c.dep_tags.len());
            assert!(c.dep_tags.iter().all(|&t| t < v.tagset_size()));
            assert!(c.tokens.iter().all(|&t| t < v.size()));
        }
    }

    #[test]
    fn grammar_is_closed() {
        let cfg = SceneConfig::default();
        let v = Vocabulary::grammar();
        let mut unk = 0;
        for i in 0..10_000 {
            let p = sample_scene_pair(&mut sample_rng(4, i), &cfg).unwrap();
            for (w, _) in realize_words(&p) {
                if v.id(w).is_none() {
                    unk += 1;
                }
            }
        }
        assert_eq!(unk, 0);
    }

    #[test]
    fn single_sentence_vocabulary() {
        let v = build_vocabulary(&[vec!["b", "a", "b"]]).unwrap();
        assert_eq!(v.tokens(), &["<pad>", "<bos>", "<eos>", "<unk>", "b", "a"]);
    }

    #[test]
    fn vocabulary_ignores_corpus_order() {
        let mut corpus = grammar_corpus();
        let a = build_vocabulary(&corpus).unwrap();
        corpus.reverse();
        for s in corpus.iter_mut() {
            s.reverse();
        }
        assert_eq!(build_vocabulary(&corpus).unwrap(), a);
    }

    #[test]
    fn unknown_word_is_an_error() {
        let v = Vocabulary::grammar();
        assert!(matches!(v.encode(&["the", "dodecahedron"]), Err(Error::UnknownToken(w)) if w == "dodecahedron"));
    }

    #[test]
    fn referent_ties_go_to_lower_id() {
        let t = obj(5, 3, 3, Color::Red, Shape::Cube);
        let a = obj(2, 3, 4, Color::Blue, Shape::Sphere);
        let b = obj(1, 3, 2, Color::Gray, Shape::Sphere);
        assert_eq!(referent(&t, &[t, a, b]).unwrap().id, 1);
        assert_eq!(relation(&t, &a), "beside");
    }
}
