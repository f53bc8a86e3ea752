use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{TextError, Tokens};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    General,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::General => "general",
            Domain::Target => "target",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Domain::General => 1,
            Domain::Target => 2,
        }
    }
}

/// Size and style knobs for [`gen_world`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldParams {
    /// Attribute (synonym) classes per domain. Classes `2i` and `2i+1` are antonyms.
    pub attribute_classes: usize,
    pub synonyms_per_class: usize,
    pub entities_per_category: usize,
    /// Probability that an NLI premise is negated.
    pub negated_premise_rate: f64,
    /// Probability that a contradiction of a positive premise is an antonym
    /// swap rather than a negation flip.
    pub antonym_contradiction_rate: f64,
    /// Raw-text documents: share whose second sentence paraphrases the first.
    pub raw_paraphrase_rate: f64,
    /// Raw-text documents: share whose second sentence negates the antonym.
    pub raw_contrast_rate: f64,
}

impl Default for WorldParams {
    fn default() -> Self {
        WorldParams {
            attribute_classes: 4,
            synonyms_per_class: 3,
            entities_per_category: 5,
            negated_premise_rate: 0.25,
            antonym_contradiction_rate: 0.5,
            raw_paraphrase_rate: 0.4,
            raw_contrast_rate: 0.3,
        }
    }
}

impl WorldParams {
    fn validate(&self) -> Result<(), TextError> {
        let bad = |m: &str| Err(TextError::InvalidWorldParams(m.to_owned()));
        if self.attribute_classes < 2 {
            return bad("attribute_classes must be >= 2");
        }
        if self.synonyms_per_class < 2 {
            return bad("synonyms_per_class must be >= 2");
        }
        if self.entities_per_category < 2 {
            return bad("entities_per_category must be >= 2");
        }
        for (name, r) in [
            ("negated_premise_rate", self.negated_premise_rate),
            ("antonym_contradiction_rate", self.antonym_contradiction_rate),
            ("raw_paraphrase_rate", self.raw_paraphrase_rate),
            ("raw_contrast_rate", self.raw_contrast_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        if self.raw_paraphrase_rate + self.raw_contrast_rate > 1.0 {
            return bad("raw_paraphrase_rate + raw_contrast_rate must be <= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    Word(String),
    /// Only rendered when the proposition is negated.
    Negation(String),
    Entity(String),
    Attribute,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    pub domain: Domain,
    pub slots: Vec<Slot>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainLexicon {
    pub attribute_classes: Vec<Vec<String>>,
    pub subject_category: String,
    pub place_category: String,
}

/// One atomic fact: a filled template.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Proposition {
    pub template: usize,
    pub subject: String,
    pub place: String,
    pub attribute: String,
    pub negated: bool,
}

/// Lexical relation between two attribute tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Same,
    Synonym,
    Antonym,
    Unrelated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorldSpec {
    pub seed: u64,
    pub params: WorldParams,
    pub function_words: Vec<String>,
    pub synonyms: BTreeMap<String, BTreeSet<String>>,
    pub antonyms: BTreeMap<String, String>,
    pub gazetteer: BTreeMap<String, BTreeSet<String>>,
    pub sentence_templates: Vec<Template>,
    pub general: DomainLexicon,
    pub target: DomainLexicon,
}

const FUNCTION_WORDS: [&str; 6] = [".", "in", "is", "no", "not", "there"];

const GENERAL_SYLLABLES: [&str; 12] = [
    "ba", "de", "fi", "ko", "lu", "ma", "ne", "po", "ri", "sa", "te", "vo",
];
const TARGET_SYLLABLES: [&str; 12] = [
    "zor", "qix", "pleth", "gral", "thrum", "xen", "vask", "drom", "kel", "ysk", "frel", "mund",
];

fn pseudo_words(
    syllables: &[&str],
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<String>, TextError> {
    let mut all: Vec<String> = syllables
        .iter()
        .flat_map(|a| syllables.iter().map(move |b| format!("{a}{b}")))
        .filter(|w| !FUNCTION_WORDS.contains(&w.as_str()))
        .collect();
    if n > all.len() {
        return Err(TextError::VocabularyBudget { needed: n, available: all.len() });
    }
    all.shuffle(rng);
    all.truncate(n);
    Ok(all)
}

fn templates_for(domain: Domain, subject: &str, place: &str) -> Vec<Template> {
    let w = |s: &str| Slot::Word(s.to_owned());
    vec![
        Template {
            domain,
            slots: vec![
                Slot::Entity(subject.to_owned()),
                w("is"),
                Slot::Negation("not".into()),
                Slot::Attribute,
                w("in"),
                Slot::Entity(place.to_owned()),
            ],
        },
        Template {
            domain,
            slots: vec![
                w("there"),
                w("is"),
                Slot::Negation("no".into()),
                Slot::Attribute,
                Slot::Entity(subject.to_owned()),
                w("in"),
                Slot::Entity(place.to_owned()),
            ],
        },
    ]
}

/// Generates a world deterministically from `seed`.
pub fn gen_world(seed: u64, params: &WorldParams) -> Result<SyntheticWorldSpec, TextError> {
    params.validate()?;
    let per_domain = params.attribute_classes * params.synonyms_per_class
        + 2 * params.entities_per_category;

    let mut synonyms = BTreeMap::new();
    let mut antonyms = BTreeMap::new();
    let mut gazetteer = BTreeMap::new();
    let mut sentence_templates = Vec::new();
    let mut lexicons = Vec::new();

    for (domain, syllables, subject_cat, place_cat) in [
        (Domain::General, &GENERAL_SYLLABLES, "PERSON", "LOC"),
        (Domain::Target, &TARGET_SYLLABLES, "COND", "SITE"),
    ] {
        let mut rng = seed::rng(seed, &[seed::tag("world"), domain.stream()]);
        let words = pseudo_words(syllables, per_domain, &mut rng)?;
        let mut it = words.into_iter();
        let classes: Vec<Vec<String>> = (0..params.attribute_classes)
            .map(|_| it.by_ref().take(params.synonyms_per_class).collect())
            .collect();
        let subjects: BTreeSet<String> = it.by_ref().take(params.entities_per_category).collect();
        let places: BTreeSet<String> = it.by_ref().take(params.entities_per_category).collect();

        for class in &classes {
            for t in class {
                let others = class.iter().filter(|s| *s != t).cloned().collect();
                synonyms.insert(t.clone(), others);
            }
        }
        for pair in classes.chunks(2) {
            if let [a, b] = pair {
                for (x, y) in a.iter().zip(b) {
                    antonyms.insert(x.clone(), y.clone());
                    antonyms.insert(y.clone(), x.clone());
                }
            }
        }
        gazetteer.insert(subject_cat.to_owned(), subjects);
        gazetteer.insert(place_cat.to_owned(), places);
        sentence_templates.extend(templates_for(domain, subject_cat, place_cat));
        lexicons.push(DomainLexicon {
            attribute_classes: classes,
            subject_category: subject_cat.to_owned(),
            place_category: place_cat.to_owned(),
        });
    }
    let target = lexicons.pop().expect("two domains");
    let general = lexicons.pop().expect("two domains");

    let world = SyntheticWorldSpec {
        seed,
        params: params.clone(),
        function_words: FUNCTION_WORDS.iter().map(|s| s.to_string()).collect(),
        synonyms,
        antonyms,
        gazetteer,
        sentence_templates,
        general,
        target,
    };
    world.validate()?;
    Ok(world)
}

impl SyntheticWorldSpec {
    pub fn lexicon(&self, domain: Domain) -> &DomainLexicon {
        match domain {
            Domain::General => &self.general,
            Domain::Target => &self.target,
        }
    }

    pub fn template_ids(&self, domain: Domain) -> Vec<usize> {
        (0..self.sentence_templates.len())
            .filter(|&i| self.sentence_templates[i].domain == domain)
            .collect()
    }

    pub fn attributes(&self, domain: Domain) -> impl Iterator<Item = &String> {
        self.lexicon(domain).attribute_classes.iter().flatten()
    }

    pub fn entities(&self, category: &str) -> impl Iterator<Item = &String> {
        self.gazetteer.get(category).into_iter().flatten()
    }

    /// Every non-function token of a domain.
    pub fn content_tokens(&self, domain: Domain) -> BTreeSet<String> {
        let lex = self.lexicon(domain);
        self.attributes(domain)
            .chain(self.entities(&lex.subject_category))
            .chain(self.entities(&lex.place_category))
            .cloned()
            .collect()
    }

    /// Every token that can appear in generated text of either domain.
    pub fn all_tokens(&self) -> BTreeSet<String> {
        let mut all = self.content_tokens(Domain::General);
        all.extend(self.content_tokens(Domain::Target));
        all.extend(self.function_words.iter().cloned());
        all
    }

    pub fn class_of(&self, attribute: &str) -> Option<(Domain, usize)> {
        [Domain::General, Domain::Target].into_iter().find_map(|d| {
            self.lexicon(d)
                .attribute_classes
                .iter()
                .position(|c| c.iter().any(|t| t == attribute))
                .map(|i| (d, i))
        })
    }

    pub fn relation(&self, a: &str, b: &str) -> Relation {
        if a == b {
            Relation::Same
        } else if self.synonyms.get(a).is_some_and(|s| s.contains(b)) {
            Relation::Synonym
        } else if self.antonyms.get(a).is_some_and(|t| t == b) {
            Relation::Antonym
        } else {
            Relation::Unrelated
        }
    }

    /// Attribute classes that are neither `class` nor its antonym class.
    pub fn unrelated_classes(&self, domain: Domain, class: usize) -> Vec<usize> {
        let n = self.lexicon(domain).attribute_classes.len();
        let partner = if class % 2 == 0 { class + 1 } else { class - 1 };
        (0..n).filter(|&c| c != class && c != partner).collect()
    }

    pub fn render(&self, p: &Proposition) -> Tokens {
        let tpl = &self.sentence_templates[p.template];
        let lex = self.lexicon(tpl.domain);
        let mut out = Vec::with_capacity(tpl.slots.len());
        for slot in &tpl.slots {
            match slot {
                Slot::Word(w) => out.push(w.clone()),
                Slot::Negation(w) => {
                    if p.negated {
                        out.push(w.clone())
                    }
                }
                Slot::Entity(cat) if *cat == lex.subject_category => out.push(p.subject.clone()),
                Slot::Entity(_) => out.push(p.place.clone()),
                Slot::Attribute => out.push(p.attribute.clone()),
            }
        }
        out
    }

    pub fn random_proposition(&self, domain: Domain, negated: bool, rng: &mut impl Rng) -> Proposition {
        let lex = self.lexicon(domain);
        let template = *self.template_ids(domain).choose(rng).expect("templates per domain");
        let subjects: Vec<&String> = self.entities(&lex.subject_category).collect();
        let places: Vec<&String> = self.entities(&lex.place_category).collect();
        let attrs: Vec<&String> = self.attributes(domain).collect();
        Proposition {
            template,
            subject: (*subjects.choose(rng).expect("subjects")).clone(),
            place: (*places.choose(rng).expect("places")).clone(),
            attribute: (*attrs.choose(rng).expect("attributes")).clone(),
            negated,
        }
    }

    /// Checks every structural invariant of the world.
    pub fn validate(&self) -> Result<(), TextError> {
        let fail = |m: String| Err(TextError::InvalidWorldParams(m));
        let function: BTreeSet<&String> = self.function_words.iter().collect();
        let general = self.content_tokens(Domain::General);
        let target = self.content_tokens(Domain::Target);
        if let Some(t) = general.intersection(&target).next() {
            return fail(format!("token {t:?} appears in both domains"));
        }
        if let Some(t) = general.iter().chain(&target).find(|t| function.contains(t)) {
            return fail(format!("content token {t:?} collides with a function word"));
        }
        for (a, b) in &self.antonyms {
            if self.antonyms.get(b) != Some(a) {
                return fail(format!("antonym relation not symmetric for {a:?}"));
            }
        }
        for tpl in &self.sentence_templates {
            let lex = self.lexicon(tpl.domain);
            if lex.attribute_classes.len() < 2 {
                return fail("fewer than two attribute classes".into());
            }
            for slot in &tpl.slots {
                if let Slot::Entity(cat) = slot {
                    if !self.gazetteer.contains_key(cat) {
                        return fail(format!("template slot names unknown category {cat:?}"));
                    }
                }
            }
        }
        for d in [Domain::General, Domain::Target] {
            if self.template_ids(d).is_empty() {
                return fail(format!("no templates for domain {}", d.as_str()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_world() {
        let p = WorldParams::default();
        assert_eq!(gen_world(3, &p).unwrap(), gen_world(3, &p).unwrap());
        assert_ne!(gen_world(3, &p).unwrap(), gen_world(4, &p).unwrap());
    }

    #[test]
    fn domains_share_only_function_words() {
        let w = gen_world(11, &WorldParams::default()).unwrap();
        let g = w.content_tokens(Domain::General);
        let t = w.content_tokens(Domain::Target);
        assert!(g.is_disjoint(&t));
        assert_eq!(g.len(), 4 * 3 + 2 * 5);
    }

    #[test]
    fn antonyms_are_symmetric_and_cross_classes() {
        let w = gen_world(5, &WorldParams::default()).unwrap();
        assert!(!w.antonyms.is_empty());
        for (a, b) in &w.antonyms {
            assert_eq!(&w.antonyms[b], a);
            let (da, ca) = w.class_of(a).unwrap();
            let (db, cb) = w.class_of(b).unwrap();
            assert_eq!(da, db);
            assert_eq!(ca ^ 1, cb);
        }
    }

    #[test]
    fn rejects_small_or_oversized_requests() {
        let p = WorldParams { attribute_classes: 1, ..Default::default() };
        assert!(matches!(gen_world(0, &p), Err(TextError::InvalidWorldParams(_))));
        let p = WorldParams { entities_per_category: 100, ..Default::default() };
        assert!(matches!(gen_world(0, &p), Err(TextError::VocabularyBudget { .. })));
    }

    #[test]
    fn json_round_trip() {
        let w = gen_world(9, &WorldParams::default()).unwrap();
        let s = serde_json::to_string(&w).unwrap();
        let back: SyntheticWorldSpec = serde_json::from_str(&s).unwrap();
        assert_eq!(back, w);
    }

    #[test]
    fn render_inserts_negation_only_when_negated() {
        let w = gen_world(2, &WorldParams::default()).unwrap();
        let mut rng = seed::rng(0, &[]);
        let mut p = w.random_proposition(Domain::Target, false, &mut rng);
        p.template = w.template_ids(Domain::Target)[1];
        let pos = w.render(&p);
        p.negated = true;
        let neg = w.render(&p);
        assert_eq!(pos[..2], ["there", "is"]);
        assert_eq!(neg.len(), pos.len() + 1);
        assert_eq!(neg[2], "no");
    }
}
