//! Object-node attributes and the class-attribute dictionary.
//!
//! An object node carries its center position, its detection confidence, and
//! a fixed-length class-attribute vector looked up by class index. Class
//! vectors come from a dictionary file; entries without a stored vector get a
//! deterministic stand-in embedding of their textual description.

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

/// Position channels per object node (center x, y).
pub const C_POS: usize = 2;
/// Confidence channels per object node.
pub const C_PROB: usize = 1;

/// Reserved index for the implicit "empty" class, whose attribute vector is
/// all zeros. It is never an entry of the dictionary.
pub const EMPTY_CLASS: usize = usize::MAX;

/// Attribute block of one object node: position, confidence, class attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectAttributes {
    pub pos: [f64; C_POS],
    pub prob: f64,
    pub class_attr: Vec<f64>,
}

impl ObjectAttributes {
    /// Total attribute dimension `C_Pos + C_Prob + C_CA`.
    pub fn dim(&self) -> usize {
        C_POS + C_PROB + self.class_attr.len()
    }

    /// Concatenated attribute vector `(x, y, prob, class_attr...)`.
    pub fn feature_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        out.extend_from_slice(&self.pos);
        out.push(self.prob);
        out.extend_from_slice(&self.class_attr);
        out
    }
}

/// One dictionary entry as stored on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DictionaryEntry {
    pub name: String,
    pub index: usize,
    pub description: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vector: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DictionaryFile {
    classes: Vec<DictionaryEntry>,
    c_ca: usize,
}

/// Immutable map from class name to (index, class-attribute vector).
///
/// Indices are contiguous from 0. The "empty" class is implicit: looking up
/// [`EMPTY_CLASS`] yields the zero vector.
#[derive(Debug, Clone)]
pub struct ClassAttributeDictionary {
    c_ca: usize,
    names: Vec<String>,
    descriptions: Vec<String>,
    vectors: Vec<Vec<f64>>,
    by_name: HashMap<String, usize>,
}

impl ClassAttributeDictionary {
    /// Build from entries, filling missing vectors with [`hash_embed`] of the
    /// description seeded by `embed_seed`.
    pub fn from_entries(entries: Vec<DictionaryEntry>, c_ca: usize, embed_seed: u64) -> Result<Self> {
        if c_ca == 0 {
            return Err(Error::Config("c_ca must be >= 1".into()));
        }
        let n = entries.len();
        let mut names = vec![String::new(); n];
        let mut descriptions = vec![String::new(); n];
        let mut vectors = vec![Vec::new(); n];
        let mut by_name = HashMap::new();
        let mut seen = vec![false; n];
        for entry in entries {
            if entry.index >= n || seen[entry.index] {
                return Err(Error::MalformedInput(format!(
                    "class indices must be unique and contiguous from 0; offending index {}",
                    entry.index
                )));
            }
            seen[entry.index] = true;
            let vector = match entry.vector {
                Some(v) => {
                    if v.len() != c_ca {
                        return Err(Error::MalformedInput(format!(
                            "class {:?} vector has {} dims, dictionary c_ca is {c_ca}",
                            entry.name,
                            v.len()
                        )));
                    }
                    v
                }
                None => hash_embed(&entry.description, c_ca, embed_seed)?,
            };
            if by_name.insert(entry.name.clone(), entry.index).is_some() {
                return Err(Error::MalformedInput(format!("duplicate class name {:?}", entry.name)));
            }
            names[entry.index] = entry.name;
            descriptions[entry.index] = entry.description;
            vectors[entry.index] = vector;
        }
        Ok(ClassAttributeDictionary {
            c_ca,
            names,
            descriptions,
            vectors,
            by_name,
        })
    }

    pub fn load(path: &Path, embed_seed: u64) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: DictionaryFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })?;
        Self::from_entries(file.classes, file.c_ca, embed_seed)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = DictionaryFile {
            classes: (0..self.len())
                .map(|i| DictionaryEntry {
                    name: self.names[i].clone(),
                    index: i,
                    description: self.descriptions[i].clone(),
                    vector: Some(self.vectors[i].clone()),
                })
                .collect(),
            c_ca: self.c_ca,
        };
        let mut text = serde_json::to_string_pretty(&file).expect("dictionary serializes");
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn c_ca(&self) -> usize {
        self.c_ca
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn class_names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingClassName(name.to_string()))
    }

    pub fn name_of(&self, index: usize) -> Result<&str> {
        self.names
            .get(index)
            .map(|s| s.as_str())
            .ok_or(Error::MissingClass {
                index,
                known: self.len(),
            })
    }
}

/// Class-attribute vector for `class_index`; the reserved empty index yields
/// the zero vector, unknown indices are an error.
pub fn lookup_class_attribute(dict: &ClassAttributeDictionary, class_index: usize) -> Result<Vec<f64>> {
    if class_index == EMPTY_CLASS {
        return Ok(vec![0.0; dict.c_ca]);
    }
    dict.vectors
        .get(class_index)
        .cloned()
        .ok_or(Error::MissingClass {
            index: class_index,
            known: dict.len(),
        })
}

/// Assemble the attribute block of a detected object: center position,
/// detection score, and the dictionary's class vector.
pub fn encode_object_node(
    class_index: usize,
    center: [f64; 2],
    score: f64,
    dict: &ClassAttributeDictionary,
) -> Result<ObjectAttributes> {
    if !(0.0..=1.0).contains(&score) {
        return Err(Error::MalformedInput(format!(
            "object score must be in [0, 1], got {score}"
        )));
    }
    Ok(ObjectAttributes {
        pos: center,
        prob: score,
        class_attr: lookup_class_attribute(dict, class_index)?,
    })
}

/// Deterministic unit-norm embedding of `text`: an FNV-1a hash of the text,
/// mixed with `seed`, seeds a ChaCha stream that fills the vector before L2
/// normalization. A stable stand-in for an external text encoder.
pub fn hash_embed(text: &str, dim: usize, seed: u64) -> Result<Vec<f64>> {
    if text.is_empty() {
        return Err(Error::MalformedInput("hash_embed of empty text".into()));
    }
    if dim == 0 {
        return Err(Error::Config("hash_embed dimension must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(text.as_bytes()) ^ seed.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return Ok(v.into_iter().map(|x| x / norm).collect());
        }
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dict_with(names: &[&str], c_ca: usize) -> ClassAttributeDictionary {
        let entries = names
            .iter()
            .enumerate()
            .map(|(i, n)| DictionaryEntry {
                name: n.to_string(),
                index: i,
                description: format!("a {n} on the desk"),
                vector: None,
            })
            .collect();
        ClassAttributeDictionary::from_entries(entries, c_ca, 7).unwrap()
    }

    #[test]
    fn empty_class_is_the_zero_vector() {
        let dict = dict_with(&["book"], 4);
        assert_eq!(lookup_class_attribute(&dict, EMPTY_CLASS).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn lookup_returns_stored_vector_exactly() {
        let entries = vec![DictionaryEntry {
            name: "book".into(),
            index: 0,
            description: "a book".into(),
            vector: Some(vec![1.0, 1.0, 1.0, 1.0]),
        }];
        let dict = ClassAttributeDictionary::from_entries(entries, 4, 0).unwrap();
        assert_eq!(lookup_class_attribute(&dict, 0).unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn out_of_range_index_is_missing_class() {
        let dict = dict_with(&["a", "b", "c"], 4);
        assert!(matches!(
            lookup_class_attribute(&dict, 99),
            Err(Error::MissingClass { index: 99, known: 3 })
        ));
    }

    #[test]
    fn encode_concatenates_pos_prob_and_class_vector() {
        let entries = vec![DictionaryEntry {
            name: "book".into(),
            index: 0,
            description: "a book".into(),
            vector: Some(vec![1.0, 1.0, 1.0, 1.0]),
        }];
        let dict = ClassAttributeDictionary::from_entries(entries, 4, 0).unwrap();
        let attrs = encode_object_node(0, [0.5, 0.5], 1.0, &dict).unwrap();
        assert_eq!(attrs.feature_vec(), vec![0.5, 0.5, 1.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(attrs.dim(), 7);
    }

    #[test]
    fn encode_empty_class_has_zero_tail() {
        let dict = dict_with(&["book"], 4);
        let attrs = encode_object_node(EMPTY_CLASS, [0.2, 0.7], 0.0, &dict).unwrap();
        assert_eq!(attrs.feature_vec(), vec![0.2, 0.7, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn encode_rejects_out_of_range_score() {
        let dict = dict_with(&["book"], 4);
        assert!(matches!(
            encode_object_node(0, [0.5, 0.5], 1.5, &dict),
            Err(Error::MalformedInput(_))
        ));
    }

    #[test]
    fn hash_embed_is_deterministic_and_unit_norm() {
        let a = hash_embed("a book", 32, 7).unwrap();
        let b = hash_embed("a book", 32, 7).unwrap();
        assert_eq!(a, b);
        let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn hash_embed_distinguishes_texts_and_seeds() {
        let pen = hash_embed("pen", 32, 7).unwrap();
        let book = hash_embed("book", 32, 7).unwrap();
        assert_ne!(pen, book);
        let other_seed = hash_embed("pen", 32, 8).unwrap();
        assert_ne!(pen, other_seed);
    }

    #[test]
    fn hash_embed_rejects_empty_text() {
        assert!(matches!(hash_embed("", 8, 0), Err(Error::MalformedInput(_))));
    }

    #[test]
    fn dictionary_rejects_non_contiguous_indices() {
        let entries = vec![DictionaryEntry {
            name: "book".into(),
            index: 1,
            description: "a book".into(),
            vector: None,
        }];
        assert!(ClassAttributeDictionary::from_entries(entries, 4, 0).is_err());
    }

    #[test]
    fn dictionary_save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dict.json");
        let dict = dict_with(&["cup", "book"], 6);
        dict.save(&path).unwrap();
        let loaded = ClassAttributeDictionary::load(&path, 7).unwrap();
        assert_eq!(loaded.class_names(), dict.class_names());
        assert_eq!(
            lookup_class_attribute(&loaded, 1).unwrap(),
            lookup_class_attribute(&dict, 1).unwrap()
        );
    }
}
