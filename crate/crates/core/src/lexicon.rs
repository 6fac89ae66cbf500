//! Caption normalization and resolution of words to MSCOCO objects.
//!
//! A caption is tokenized, every token is singularized, and the singular forms
//! are looked up in a synonym table. Two-token compounds ("hot dog") are tried
//! before single tokens so that their parts never produce a second object.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tsv;

const SHIPPED_OBJECTS: &str = include_str!("../data/objects.tsv");
const SHIPPED_SYNONYMS: &str = include_str!("../data/synonyms.tsv");

/// Number of objects in the standard MSCOCO configuration.
pub const MSCOCO_OBJECT_COUNT: usize = 80;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ObjectInfo {
    pub name: String,
    pub super_category: String,
}

/// The object set together with the surface forms that refer to each object.
#[derive(Debug, Clone)]
pub struct ObjectVocabulary {
    objects: Vec<ObjectInfo>,
    index: HashMap<String, usize>,
    /// singular surface form -> object name
    synonyms: BTreeMap<String, String>,
    /// singular two-token surface form -> object name
    compounds: BTreeMap<(String, String), String>,
    table_hash: String,
}

/// A resolved object reference inside a token sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Mention {
    pub object: String,
    pub token_start: usize,
    pub token_len: usize,
    pub surface: String,
}

impl Mention {
    /// Index of the last token covered by the mention.
    pub fn token_end(&self) -> usize {
        self.token_start + self.token_len - 1
    }
}

impl ObjectVocabulary {
    /// The shipped 80-object table with the shipped synonym list.
    pub fn standard() -> Self {
        let vocab = Self::from_tables(
            Path::new("<shipped objects>"),
            SHIPPED_OBJECTS,
            Path::new("<shipped synonyms>"),
            SHIPPED_SYNONYMS,
        )
        .expect("shipped vocabulary tables are valid");
        debug_assert_eq!(vocab.len(), MSCOCO_OBJECT_COUNT);
        vocab
    }

    /// Loads a vocabulary; either path may be omitted to use the shipped table.
    pub fn load(objects_path: Option<&Path>, synonyms_path: Option<&Path>) -> Result<Self> {
        let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| Error::io(p, e));
        let (obj_label, obj_text) = match objects_path {
            Some(p) => (p.to_path_buf(), read(p)?),
            None => ("<shipped objects>".into(), SHIPPED_OBJECTS.to_owned()),
        };
        let (syn_label, syn_text) = match synonyms_path {
            Some(p) => (p.to_path_buf(), read(p)?),
            None => ("<shipped synonyms>".into(), SHIPPED_SYNONYMS.to_owned()),
        };
        Self::from_tables(&obj_label, &obj_text, &syn_label, &syn_text)
    }

    pub fn from_tables(
        objects_label: &Path,
        objects_text: &str,
        synonyms_label: &Path,
        synonyms_text: &str,
    ) -> Result<Self> {
        let mut objects = Vec::new();
        let mut index = HashMap::new();
        for row in tsv::parse(objects_label, objects_text)? {
            row.expect_fields(objects_label, 2)?;
            let name = normalize_phrase(&row.fields[0]);
            if name.is_empty() {
                return Err(row.error(objects_label, "empty object name"));
            }
            if index.contains_key(&name) {
                return Err(Error::Validation(format!("duplicate object {name:?}")));
            }
            index.insert(name.clone(), objects.len());
            objects.push(ObjectInfo {
                name,
                super_category: row.fields[1].trim().to_lowercase(),
            });
        }
        if objects.is_empty() {
            return Err(Error::Validation("object table is empty".into()));
        }

        let mut vocab = ObjectVocabulary {
            objects,
            index,
            synonyms: BTreeMap::new(),
            compounds: BTreeMap::new(),
            table_hash: String::new(),
        };
        let names: Vec<String> = vocab.objects.iter().map(|o| o.name.clone()).collect();
        for name in &names {
            vocab.add_surface(name, name)?;
        }
        for row in tsv::parse(synonyms_label, synonyms_text)? {
            row.expect_fields(synonyms_label, 2)?;
            let object = normalize_phrase(&row.fields[1]);
            if !vocab.index.contains_key(&object) {
                return Err(Error::Validation(format!(
                    "{}:{}: synonym {:?} names unknown object {:?}",
                    synonyms_label.display(),
                    row.line,
                    row.fields[0],
                    object
                )));
            }
            vocab.add_surface(&row.fields[0], &object)?;
        }
        vocab.table_hash = vocab.compute_hash();
        Ok(vocab)
    }

    fn add_surface(&mut self, surface: &str, object: &str) -> Result<()> {
        let tokens = tokenize(surface);
        let singular: Vec<String> = tokens.iter().map(|t| singularize(t)).collect();
        let existing = match singular.as_slice() {
            [one] => self
                .synonyms
                .insert(one.clone(), object.to_owned())
                .map(|prev| (one.clone(), prev)),
            [first, second] => self
                .compounds
                .insert((first.clone(), second.clone()), object.to_owned())
                .map(|prev| (format!("{first} {second}"), prev)),
            _ => {
                return Err(Error::Validation(format!(
                    "surface form {surface:?} must have one or two tokens"
                )))
            }
        };
        match existing {
            Some((key, prev)) if prev != object => Err(Error::Validation(format!(
                "surface form {key:?} maps to both {prev:?} and {object:?}"
            ))),
            _ => Ok(()),
        }
    }

    fn compute_hash(&self) -> String {
        let mut canonical = String::new();
        for o in &self.objects {
            let _ = writeln!(canonical, "O\t{}\t{}", o.name, o.super_category);
        }
        for (surface, object) in &self.synonyms {
            let _ = writeln!(canonical, "S\t{surface}\t{object}");
        }
        for ((a, b), object) in &self.compounds {
            let _ = writeln!(canonical, "C\t{a} {b}\t{object}");
        }
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn objects(&self) -> &[ObjectInfo] {
        &self.objects
    }

    pub fn contains(&self, object: &str) -> bool {
        self.index.contains_key(object)
    }

    /// Case-insensitive lookup returning the canonical object name.
    pub fn canonical_name(&self, name: &str) -> Option<&str> {
        let key = normalize_phrase(name);
        self.index.get(&key).map(|&i| self.objects[i].name.as_str())
    }

    pub fn super_category(&self, object: &str) -> Option<&str> {
        self.index
            .get(object)
            .map(|&i| self.objects[i].super_category.as_str())
    }

    /// Object for a single singular surface form.
    pub fn synonym(&self, surface: &str) -> Option<&str> {
        self.synonyms.get(surface).map(String::as_str)
    }

    /// Object for a singular two-token surface form.
    pub fn compound(&self, first: &str, second: &str) -> Option<&str> {
        // BTreeMap<(String, String)> cannot be queried with borrowed pairs.
        self.compounds
            .get(&(first.to_owned(), second.to_owned()))
            .map(String::as_str)
    }

    pub fn synonyms(&self) -> &BTreeMap<String, String> {
        &self.synonyms
    }

    pub fn compounds(&self) -> &BTreeMap<(String, String), String> {
        &self.compounds
    }

    /// SHA-256 over a canonical dump of objects, synonyms and compounds.
    pub fn table_hash(&self) -> &str {
        &self.table_hash
    }

    /// Tokenizes and resolves a raw caption in one step.
    pub fn resolve_text(&self, text: &str) -> (Vec<String>, Vec<Mention>) {
        let tokens = tokenize(text);
        let mentions = resolve_mentions(&tokens, self);
        (tokens, mentions)
    }
}

fn normalize_phrase(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Lowercases, splits on whitespace and strips leading/trailing punctuation
/// from each token. Inner punctuation ("hot-dog") is kept.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|raw| {
            raw.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|t| !t.is_empty())
        .collect()
}

const IRREGULAR_PLURALS: &[(&str, &str)] = &[
    ("men", "man"),
    ("women", "woman"),
    ("people", "people"),
    ("children", "child"),
    ("skis", "ski"),
    ("taxis", "taxi"),
    ("mice", "mouse"),
    ("geese", "goose"),
    ("teeth", "tooth"),
    ("feet", "foot"),
    ("oxen", "ox"),
    ("knives", "knife"),
    ("wives", "wife"),
    ("lives", "life"),
    ("leaves", "leaf"),
    ("loaves", "loaf"),
    ("halves", "half"),
    ("calves", "calf"),
    ("shelves", "shelf"),
    ("wolves", "wolf"),
    ("scarves", "scarf"),
    ("buses", "bus"),
    ("cookies", "cookie"),
    ("movies", "movie"),
    ("brownies", "brownie"),
    ("goalies", "goalie"),
    ("hoodies", "hoodie"),
    ("selfies", "selfie"),
    ("potatoes", "potato"),
    ("tomatoes", "tomato"),
    ("mangoes", "mango"),
    ("heroes", "hero"),
    ("dominoes", "domino"),
    ("sheep", "sheep"),
    ("deer", "deer"),
];

fn singularize_once(word: &str) -> String {
    if let Some(&(_, singular)) = IRREGULAR_PLURALS.iter().find(|(p, _)| *p == word) {
        return singular.to_owned();
    }
    let n = word.chars().count();
    if n > 4 && word.ends_with("ies") {
        return format!("{}y", &word[..word.len() - 3]);
    }
    if n >= 4 && ["sses", "shes", "ches", "xes"].iter().any(|s| word.ends_with(s)) {
        return word[..word.len() - 2].to_owned();
    }
    if n >= 3
        && word.ends_with('s')
        && !["ss", "us", "is"].iter().any(|s| word.ends_with(s))
    {
        return word[..word.len() - 1].to_owned();
    }
    word.to_owned()
}

/// Rule-based English singular form of a lowercase token.
///
/// Irregular plurals are looked up first, then suffix rules apply. Rules are
/// re-applied until the word stops changing, which makes the function
/// idempotent ("mens" -> "men" -> "man").
pub fn singularize(token: &str) -> String {
    let mut current = token.to_owned();
    loop {
        let next = singularize_once(&current);
        if next == current {
            return current;
        }
        current = next;
    }
}

/// Left-to-right longest-match resolution of tokens to objects.
///
/// At each position the singular bigram is tried as a compound first; a match
/// consumes both tokens. Otherwise the singular token is looked up alone.
pub fn resolve_mentions<S: AsRef<str>>(tokens: &[S], vocab: &ObjectVocabulary) -> Vec<Mention> {
    let singular: Vec<String> = tokens.iter().map(|t| singularize(t.as_ref())).collect();
    let mut mentions = Vec::new();
    let mut i = 0;
    while i < singular.len() {
        if i + 1 < singular.len() {
            if let Some(object) = vocab.compound(&singular[i], &singular[i + 1]) {
                mentions.push(Mention {
                    object: object.to_owned(),
                    token_start: i,
                    token_len: 2,
                    surface: format!("{} {}", tokens[i].as_ref(), tokens[i + 1].as_ref()),
                });
                i += 2;
                continue;
            }
        }
        if let Some(object) = vocab.synonym(&singular[i]) {
            mentions.push(Mention {
                object: object.to_owned(),
                token_start: i,
                token_len: 1,
                surface: tokens[i].as_ref().to_owned(),
            });
        }
        i += 1;
    }
    mentions
}
