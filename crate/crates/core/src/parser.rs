//! Offline decomposition of referring expressions into context, ground-object
//! and spatial-position fragments.
//!
//! Matching is lexicon driven: the expression is lowercased, split on
//! whitespace, edge punctuation is stripped from each token, and phrases are
//! matched on token boundaries. The leftmost position with any hit wins; at
//! that position the phrase with the most tokens wins. Fragments are sliced
//! out of the lowercased expression, so they are always contiguous substrings
//! of it.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const REFSEGRS_CATEGORIES: &str = include_str!("../data/refsegrs_categories.txt");
pub const RRSISD_CATEGORIES: &str = include_str!("../data/rrsisd_categories.txt");
pub const SYNTHETIC_CATEGORIES: &str = include_str!("../data/synthetic_categories.txt");
pub const DEFAULT_SPATIAL: &str = include_str!("../data/spatial_default.txt");

const STOPWORDS: &[&str] = &[
    "a", "an", "the", "of", "to", "in", "on", "at", "and", "or", "is", "are", "this", "that",
    "with", "by", "for", "which", "its",
];

/// Lowercased phrase split into tokens.
fn normalize_phrase(raw: &str) -> Vec<String> {
    raw.to_lowercase()
        .split_whitespace()
        .map(strip_punct)
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

fn strip_punct(token: &str) -> &str {
    token.trim_matches(|c: char| !c.is_alphanumeric())
}

/// Ordered phrase list; longer phrases (by token count, then characters) first.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PhraseList {
    phrases: Vec<Vec<String>>,
}

impl PhraseList {
    pub fn new<I, S>(phrases: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut list: Vec<Vec<String>> = phrases
            .into_iter()
            .map(|p| normalize_phrase(p.as_ref()))
            .filter(|p| !p.is_empty())
            .collect();
        list.sort_by(|a, b| {
            b.len()
                .cmp(&a.len())
                .then_with(|| b.join(" ").len().cmp(&a.join(" ").len()))
                .then_with(|| a.cmp(b))
        });
        list.dedup();
        Self { phrases: list }
    }

    pub fn phrases(&self) -> impl Iterator<Item = String> + '_ {
        self.phrases.iter().map(|p| p.join(" "))
    }

    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }

    /// Leftmost-longest match over `tokens`, as a token range.
    fn find(&self, tokens: &[Token<'_>]) -> Option<(usize, usize)> {
        (0..tokens.len()).find_map(|start| {
            self.phrases.iter().find_map(|p| {
                let end = start + p.len();
                (end <= tokens.len()
                    && tokens[start..end].iter().zip(p).all(|(t, w)| t.text == w))
                .then_some((start, end))
            })
        })
    }
}

/// Parse a lexicon file body: one phrase per line, `#` starts a comment.
fn lexicon_lines(body: &str) -> impl Iterator<Item = &str> {
    body.lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CategoryLexicon {
    categories: PhraseList,
    /// All matchable phrases (categories and aliases).
    surface: PhraseList,
    aliases: BTreeMap<String, String>,
}

impl CategoryLexicon {
    pub fn new<I, S>(categories: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Self::with_aliases(categories, std::iter::empty::<(String, String)>())
    }

    pub fn with_aliases<I, S, A, K, V>(categories: I, aliases: A) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
        A: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let categories = PhraseList::new(categories);
        let aliases: BTreeMap<String, String> = aliases
            .into_iter()
            .map(|(k, v)| {
                (
                    normalize_phrase(k.as_ref()).join(" "),
                    normalize_phrase(v.as_ref()).join(" "),
                )
            })
            .filter(|(k, v)| !k.is_empty() && !v.is_empty())
            .collect();
        let surface = PhraseList::new(categories.phrases().chain(aliases.keys().cloned()));
        Self {
            categories,
            surface,
            aliases,
        }
    }

    /// Lines of the form `phrase` or `alias -> canonical`.
    pub fn parse(body: &str) -> Self {
        let mut cats = Vec::new();
        let mut aliases = Vec::new();
        for line in lexicon_lines(body) {
            match line.split_once("->") {
                Some((alias, canon)) => {
                    aliases.push((alias.trim().to_string(), canon.trim().to_string()));
                    cats.push(canon.trim().to_string());
                }
                None => cats.push(line.to_string()),
            }
        }
        Self::with_aliases(cats, aliases)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::parse(&body))
    }

    pub fn refsegrs() -> Self {
        Self::parse(REFSEGRS_CATEGORIES)
    }

    pub fn rrsisd() -> Self {
        Self::parse(RRSISD_CATEGORIES)
    }

    pub fn synthetic() -> Self {
        Self::parse(SYNTHETIC_CATEGORIES)
    }

    pub fn categories(&self) -> impl Iterator<Item = String> + '_ {
        self.categories.phrases()
    }

    /// Canonical category for a matched fragment, if it is a known phrase.
    pub fn canonical(&self, fragment: &str) -> Option<String> {
        let key = normalize_phrase(fragment).join(" ");
        if let Some(c) = self.aliases.get(&key) {
            return Some(c.clone());
        }
        self.categories.phrases().find(|c| *c == key)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SpatialLexicon {
    relations: PhraseList,
}

impl SpatialLexicon {
    pub fn new<I, S>(phrases: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Self {
            relations: PhraseList::new(phrases),
        }
    }

    pub fn parse(body: &str) -> Self {
        Self::new(lexicon_lines(body))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::parse(&body))
    }

    pub fn relations(&self) -> impl Iterator<Item = String> + '_ {
        self.relations.phrases()
    }
}

impl SpatialLexicon {
    /// The curated default vocabulary shipped with the crate.
    pub fn default_lexicon() -> Self {
        Self::parse(DEFAULT_SPATIAL)
    }
}

/// The three text fragments consumed by the model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecomposedExpression {
    /// The untouched input expression.
    pub context: String,
    pub ground_object: String,
    /// Empty when no spatial phrase was found.
    pub spatial_position: String,
}

#[derive(Debug)]
struct Token<'a> {
    text: &'a str,
    start: usize,
    end: usize,
}

fn tokens(lower: &str) -> Vec<Token<'_>> {
    let mut out = Vec::new();
    let mut offset = 0;
    for raw in lower.split_whitespace() {
        let raw_start = offset + lower[offset..].find(raw).expect("token comes from the string");
        offset = raw_start + raw.len();
        let stripped = strip_punct(raw);
        if stripped.is_empty() {
            continue;
        }
        let lead = raw.find(stripped).expect("stripped is a substring");
        out.push(Token {
            text: stripped,
            start: raw_start + lead,
            end: raw_start + lead + stripped.len(),
        });
    }
    out
}

/// Split `expression` into context, ground-object and spatial fragments.
pub fn decompose(
    expression: &str,
    categories: &CategoryLexicon,
    spatial: &SpatialLexicon,
) -> Result<DecomposedExpression> {
    if expression.trim().is_empty() {
        return Err(Error::EmptyExpression);
    }
    let lower = expression.to_lowercase();
    let toks = tokens(&lower);
    let slice = |(s, e): (usize, usize)| lower[toks[s].start..toks[e - 1].end].to_string();

    let spatial_span = spatial.relations.find(&toks);
    let spatial_position = spatial_span.map(slice).unwrap_or_default();

    let ground_object = match categories.surface.find(&toks) {
        Some(span) => slice(span),
        None => fallback_object(&toks, spatial_span)
            .map(|i| toks[i].text.to_string())
            // only punctuation: fall back to the trimmed expression itself
            .unwrap_or_else(|| lower.trim().to_string()),
    };

    Ok(DecomposedExpression {
        context: expression.to_string(),
        ground_object,
        spatial_position,
    })
}

/// Index of the last content token outside the spatial fragment.
fn fallback_object(toks: &[Token<'_>], spatial: Option<(usize, usize)>) -> Option<usize> {
    let outside = |i: &usize| spatial.is_none_or(|(s, e)| *i < s || *i >= e);
    let content = |i: &usize| !STOPWORDS.contains(&toks[*i].text);
    let idx: Vec<usize> = (0..toks.len()).collect();
    idx.iter()
        .rev()
        .copied()
        .find(|i| outside(i) && content(i))
        .or_else(|| idx.iter().rev().copied().find(|i| outside(i)))
        .or_else(|| idx.last().copied())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CorpusSummary {
    pub written: usize,
    pub skipped: usize,
}

/// Annotate a JSON Lines corpus with `ground_object` / `spatial_position`.
///
/// Malformed records (bad JSON, missing or blank `expression`) are skipped
/// with a warning. Re-running on the output reproduces it byte for byte.
pub fn decompose_corpus(
    input: impl AsRef<Path>,
    output: impl AsRef<Path>,
    categories: &CategoryLexicon,
    spatial: &SpatialLexicon,
) -> Result<CorpusSummary> {
    let (input, output) = (input.as_ref(), output.as_ref());
    let file = fs::File::open(input).map_err(|e| Error::io(input, e))?;
    let mut records = Vec::new();
    let mut summary = CorpusSummary::default();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(input, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match annotate_record(&line, categories, spatial) {
            Ok(rec) => records.push(rec),
            Err(why) => {
                log::warn!("{}:{}: skipping record: {why}", input.display(), lineno + 1);
                summary.skipped += 1;
            }
        }
    }
    let out = fs::File::create(output).map_err(|e| Error::io(output, e))?;
    let mut w = BufWriter::new(out);
    for rec in &records {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(output, e))?;
    }
    w.flush().map_err(|e| Error::io(output, e))?;
    summary.written = records.len();
    Ok(summary)
}

fn annotate_record(
    line: &str,
    categories: &CategoryLexicon,
    spatial: &SpatialLexicon,
) -> std::result::Result<serde_json::Map<String, serde_json::Value>, String> {
    let mut rec: serde_json::Map<String, serde_json::Value> =
        serde_json::from_str(line).map_err(|e| format!("invalid JSON object: {e}"))?;
    let expr = rec
        .get("expression")
        .and_then(|v| v.as_str())
        .ok_or("missing string field `expression`")?;
    let d = decompose(expr, categories, spatial).map_err(|e| e.to_string())?;
    rec.insert("ground_object".into(), d.ground_object.into());
    rec.insert("spatial_position".into(), d.spatial_position.into());
    Ok(rec)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lex() -> (CategoryLexicon, SpatialLexicon) {
        (CategoryLexicon::refsegrs(), SpatialLexicon::default_lexicon())
    }

    #[test]
    fn van_left_of_road() {
        let (c, s) = lex();
        let d = decompose("the gray van on the left of the road", &c, &s).unwrap();
        assert_eq!(d.context, "the gray van on the left of the road");
        assert_eq!(d.ground_object, "van");
        assert_eq!(d.spatial_position, "on the left of");
    }

    #[test]
    fn two_word_category_beats_prefix() {
        let (c, s) = lex();
        let d = decompose("road marking", &c, &s).unwrap();
        assert_eq!(d.ground_object, "road marking");
        assert_eq!(d.spatial_position, "");
    }

    #[test]
    fn no_match_falls_back_to_last_token() {
        let (c, s) = lex();
        let d = decompose("it", &c, &s).unwrap();
        assert_eq!(d.ground_object, "it");
        assert_eq!(d.spatial_position, "");
        let d = decompose("the thing on the left", &c, &s).unwrap();
        assert_eq!(d.ground_object, "thing");
        assert_eq!(d.spatial_position, "on the left");
    }

    #[test]
    fn blank_is_an_error() {
        let (c, s) = lex();
        assert!(matches!(decompose("   ", &c, &s), Err(Error::EmptyExpression)));
    }

    #[test]
    fn punctuation_and_case() {
        let (c, s) = lex();
        let d = decompose("The Bus, Next to the Building.", &c, &s).unwrap();
        assert_eq!(d.ground_object, "bus");
        assert_eq!(d.spatial_position, "next to");
        assert_eq!(d.context, "The Bus, Next to the Building.");
    }

    #[test]
    fn lexicon_ordering_puts_longer_first() {
        let l = PhraseList::new(["road", "road marking", "a b c"]);
        let v: Vec<String> = l.phrases().collect();
        assert_eq!(v, vec!["a b c", "road marking", "road"]);
    }

    #[test]
    fn aliases_resolve_to_canonical() {
        let c = CategoryLexicon::parse("car\nsedan -> car\n# comment\n");
        let d = decompose("the white sedan", &c, &SpatialLexicon::default()).unwrap();
        assert_eq!(d.ground_object, "sedan");
        assert_eq!(c.canonical(&d.ground_object).as_deref(), Some("car"));
    }

    #[test]
    fn every_category_matches_itself() {
        let (c, s) = lex();
        for cat in c.categories() {
            assert_eq!(decompose(&cat, &c, &s).unwrap().ground_object, cat);
        }
    }
}
