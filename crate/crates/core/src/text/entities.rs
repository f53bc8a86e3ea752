use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

/// A gazetteer entity occurrence inside a token sequence.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EntitySpan {
    pub start: usize,
    pub length: usize,
    pub category: String,
}

impl EntitySpan {
    pub fn end(&self) -> usize {
        self.start + self.length
    }

    pub fn text<'a>(&self, tokens: &'a [String]) -> &'a [String] {
        &tokens[self.start..self.end()]
    }
}

/// Category → entity lookup. Entries may span several whitespace-separated
/// tokens.
#[derive(Debug, Clone)]
pub struct Gazetteer {
    by_text: HashMap<Vec<String>, String>,
    longest: usize,
}

impl Gazetteer {
    pub fn new(categories: &BTreeMap<String, BTreeSet<String>>) -> Self {
        let mut by_text: HashMap<Vec<String>, String> = HashMap::new();
        let mut longest = 0;
        // BTreeMap order: on a collision the lexicographically smallest category wins.
        for (cat, entries) in categories {
            for e in entries {
                let toks: Vec<String> = e.split_whitespace().map(str::to_owned).collect();
                if toks.is_empty() {
                    continue;
                }
                longest = longest.max(toks.len());
                by_text.entry(toks).or_insert_with(|| cat.clone());
            }
        }
        Gazetteer { by_text, longest }
    }

    pub fn category_of(&self, tokens: &[String]) -> Option<&str> {
        self.by_text.get(tokens).map(String::as_str)
    }
}

/// Greedy left-to-right longest-match lookup; spans never overlap.
pub fn find_entities(tokens: &[String], gazetteer: &Gazetteer) -> Vec<EntitySpan> {
    let mut spans = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let max = gazetteer.longest.min(tokens.len() - i);
        let hit = (1..=max)
            .rev()
            .find_map(|len| gazetteer.category_of(&tokens[i..i + len]).map(|c| (len, c)));
        match hit {
            Some((length, category)) => {
                spans.push(EntitySpan { start: i, length, category: category.to_owned() });
                i += length;
            }
            None => i += 1,
        }
    }
    spans
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::tokenize;

    fn gaz(entries: &[(&str, &[&str])]) -> Gazetteer {
        let map = entries
            .iter()
            .map(|(c, es)| (c.to_string(), es.iter().map(|s| s.to_string()).collect()))
            .collect();
        Gazetteer::new(&map)
    }

    /// Brute force: every (start, len) substring that is a gazetteer entry.
    fn all_hits(tokens: &[String], g: &Gazetteer) -> Vec<EntitySpan> {
        let mut hits = Vec::new();
        for s in 0..tokens.len() {
            for e in s + 1..=tokens.len() {
                if let Some(c) = g.category_of(&tokens[s..e]) {
                    hits.push(EntitySpan { start: s, length: e - s, category: c.into() });
                }
            }
        }
        hits
    }

    /// Every set of pairwise non-overlapping hits, sorted by start.
    fn tilings(hits: &[EntitySpan]) -> Vec<Vec<EntitySpan>> {
        let mut out: Vec<Vec<EntitySpan>> = vec![vec![]];
        for h in hits {
            let mut extra = Vec::new();
            for t in &out {
                if t.iter().all(|x| x.end() <= h.start || h.end() <= x.start) {
                    let mut t2 = t.clone();
                    t2.push(h.clone());
                    t2.sort_by_key(|x| x.start);
                    extra.push(t2);
                }
            }
            out.extend(extra);
        }
        out
    }

    #[test]
    fn finds_person_and_location() {
        let g = gaz(&[("PERSON", &["john"]), ("LOC", &["paris"])]);
        let toks = tokenize("john visited paris");
        let found = find_entities(&toks, &g);
        let brute = all_hits(&toks, &g);
        assert_eq!(found, brute);
        assert_eq!(
            found,
            vec![
                EntitySpan { start: 0, length: 1, category: "PERSON".into() },
                EntitySpan { start: 2, length: 1, category: "LOC".into() },
            ]
        );
    }

    #[test]
    fn no_hits_gives_empty() {
        let g = gaz(&[("PERSON", &["john"])]);
        assert!(find_entities(&tokenize("nobody here"), &g).is_empty());
    }

    #[test]
    fn longest_match_wins_and_is_a_legal_tiling() {
        let g = gaz(&[("LOC", &["new york", "york city", "new"]), ("PERSON", &["city"])]);
        let toks = tokenize("in new york city now");
        let found = find_entities(&toks, &g);
        assert_eq!(
            found,
            vec![
                EntitySpan { start: 1, length: 2, category: "LOC".into() },
                EntitySpan { start: 3, length: 1, category: "PERSON".into() },
            ]
        );
        assert!(tilings(&all_hits(&toks, &g)).contains(&found));
    }
}
