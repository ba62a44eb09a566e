//! Synthetic corpus generation, the frame-stacking front end, and dataset
//! serialization.
//!
//! Utterances come from a small template grammar: each token owns a fixed
//! 64-dim codebook signature, repeated `frames_per_token` times with
//! Gaussian noise. That keeps targets exact while still exercising the
//! full acoustic path.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;

/// Raw acoustic feature width produced by the generator.
pub const RAW_FEATURE_DIM: usize = 64;

/// Stacking factor of the feature pipeline; output width is this times the
/// input width.
pub const STACK_FACTOR: usize = 3;

/// Beginning-of-sequence symbol stored at index 0 of the word-piece and
/// slot-tag lists.
pub const BOS_SYMBOL: &str = "<s>";

/// Catch-all slot tag for tokens outside any slot span.
pub const OTHER_TAG: &str = "Other";

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {source}")]
    MalformedLine {
        line: usize,
        source: serde_json::Error,
    },
    #[error("line {line}: unknown {kind} \"{symbol}\"")]
    UnknownSymbol {
        line: usize,
        kind: &'static str,
        symbol: String,
    },
    #[error("line {line}: tokens length {tokens} != slots length {slots}")]
    LengthMismatch {
        line: usize,
        tokens: usize,
        slots: usize,
    },
    #[error("line {line}: feature row {row} has {got} values, expected {expected}")]
    RaggedFeatures {
        line: usize,
        row: usize,
        got: usize,
        expected: usize,
    },
    #[error("grammar has no templates")]
    EmptyGrammar,
    #[error("template \"{template}\": placeholder <{tag}> has no fillers")]
    MissingFillers { template: String, tag: String },
    #[error("grammar: {0}")]
    BadGrammar(String),
    #[error("corpus size must be positive")]
    EmptyCorpus,
    #[error("feature pipeline needs at least one input frame")]
    EmptyFeatures,
    #[error("vocabulary: {0}")]
    BadVocabulary(String),
    #[error("malformed vocabulary file {path}: {source}")]
    MalformedVocabulary {
        path: String,
        source: serde_json::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Label inventories. Index 0 of the word-piece and slot-tag lists is the
/// BOS symbol fed to the prediction networks before any real label; the
/// blank ids sit one past the end of each list and never appear in targets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub word_pieces: Vec<String>,
    pub slot_tags: Vec<String>,
    pub intents: Vec<String>,
}

impl Vocabulary {
    pub fn new(
        word_pieces: Vec<String>,
        slot_tags: Vec<String>,
        intents: Vec<String>,
    ) -> Result<Self, DataError> {
        let v = Self {
            word_pieces,
            slot_tags,
            intents,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        for (name, list) in [
            ("word_pieces", &self.word_pieces),
            ("slot_tags", &self.slot_tags),
            ("intents", &self.intents),
        ] {
            if list.is_empty() {
                return Err(DataError::BadVocabulary(format!("{name} list is empty")));
            }
            let unique: BTreeSet<&String> = list.iter().collect();
            if unique.len() != list.len() {
                return Err(DataError::BadVocabulary(format!(
                    "{name} list has duplicate entries"
                )));
            }
        }
        if !self.slot_tags.iter().any(|t| t == OTHER_TAG) {
            return Err(DataError::BadVocabulary(format!(
                "slot_tags must contain \"{OTHER_TAG}\""
            )));
        }
        Ok(())
    }

    /// Number of word-piece labels (BOS included, blank excluded).
    pub fn n_wp(&self) -> usize {
        self.word_pieces.len()
    }

    pub fn n_slot(&self) -> usize {
        self.slot_tags.len()
    }

    pub fn n_intent(&self) -> usize {
        self.intents.len()
    }

    pub fn bos_wp(&self) -> usize {
        0
    }

    pub fn bos_slot(&self) -> usize {
        0
    }

    /// Blank word-piece id, one past the label range.
    pub fn blank_wp(&self) -> usize {
        self.word_pieces.len()
    }

    pub fn blank_slot(&self) -> usize {
        self.slot_tags.len()
    }

    pub fn other_slot(&self) -> usize {
        self.slot_tags
            .iter()
            .position(|t| t == OTHER_TAG)
            .expect("validated vocabulary contains Other")
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let json = serde_json::to_string_pretty(self).expect("vocabulary serializes");
        fs::write(path, json).map_err(|e| io_err(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let v: Self = serde_json::from_str(&text).map_err(|e| DataError::MalformedVocabulary {
            path: path.display().to_string(),
            source: e,
        })?;
        v.validate()?;
        Ok(v)
    }
}

/// One spoken utterance: raw (pre-pipeline) frames plus aligned label
/// sequences and an intent.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub features: Tensor,
    pub tokens: Vec<usize>,
    pub slots: Vec<usize>,
    pub intent: usize,
}

/// Template grammar driving the synthetic corpus.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GrammarSpec {
    pub templates: Vec<Template>,
    pub fillers: BTreeMap<String, Vec<String>>,
    pub frames_per_token: usize,
    pub noise_sigma: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Template {
    /// Whitespace-separated tokens; `<Tag>` tokens draw from the fillers.
    pub pattern: String,
    pub intent: String,
}

impl GrammarSpec {
    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let g: Self = serde_json::from_str(&text)
            .map_err(|e| DataError::BadGrammar(format!("{}: {e}", path.display())))?;
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.templates.is_empty() {
            return Err(DataError::EmptyGrammar);
        }
        if self.frames_per_token == 0 {
            return Err(DataError::BadGrammar(
                "frames_per_token must be positive".into(),
            ));
        }
        if self.noise_sigma.is_nan() || self.noise_sigma < 0.0 {
            return Err(DataError::BadGrammar(
                "noise_sigma must be non-negative".into(),
            ));
        }
        for template in &self.templates {
            if template.intent.trim().is_empty() {
                return Err(DataError::BadGrammar(format!(
                    "template \"{}\" has an empty intent",
                    template.pattern
                )));
            }
            if template.pattern.split_whitespace().next().is_none() {
                return Err(DataError::BadGrammar("empty template pattern".into()));
            }
            for token in template.pattern.split_whitespace() {
                if let Some(tag) = placeholder_tag(token) {
                    let ok = self.fillers.get(tag).is_some_and(|f| !f.is_empty());
                    if !ok {
                        return Err(DataError::MissingFillers {
                            template: template.pattern.clone(),
                            tag: tag.to_string(),
                        });
                    }
                }
            }
        }
        for (tag, fillers) in &self.fillers {
            for filler in fillers {
                if filler.split_whitespace().next().is_none() {
                    return Err(DataError::BadGrammar(format!(
                        "filler for <{tag}> is empty"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn placeholder_tag(token: &str) -> Option<&str> {
    token
        .strip_prefix('<')
        .and_then(|t| t.strip_suffix('>'))
        .filter(|t| !t.is_empty())
}

/// Draws `n` utterances and the closed vocabulary they use. Deterministic
/// for a given (grammar, n, seed): the token codebook is drawn first, then
/// utterances in order, from one seeded stream.
pub fn generate_corpus(
    grammar: &GrammarSpec,
    n: usize,
    seed: u64,
) -> Result<(Vec<Utterance>, Vocabulary), DataError> {
    grammar.validate()?;
    if n == 0 {
        return Err(DataError::EmptyCorpus);
    }

    let mut surface: BTreeSet<String> = BTreeSet::new();
    let mut tags: BTreeSet<String> = BTreeSet::new();
    let mut intents: BTreeSet<String> = BTreeSet::new();
    for template in &grammar.templates {
        intents.insert(template.intent.clone());
        for token in template.pattern.split_whitespace() {
            match placeholder_tag(token) {
                Some(tag) => {
                    tags.insert(tag.to_string());
                }
                None => {
                    surface.insert(token.to_string());
                }
            }
        }
    }
    for (tag, fillers) in &grammar.fillers {
        if !tags.contains(tag) {
            continue;
        }
        for filler in fillers {
            for token in filler.split_whitespace() {
                surface.insert(token.to_string());
            }
        }
    }

    let mut word_pieces = vec![BOS_SYMBOL.to_string()];
    word_pieces.extend(surface);
    let mut slot_tags = vec![BOS_SYMBOL.to_string(), OTHER_TAG.to_string()];
    slot_tags.extend(tags.into_iter().filter(|t| t != OTHER_TAG));
    let vocab = Vocabulary::new(word_pieces, slot_tags, intents.into_iter().collect())?;

    let wp_index: HashMap<&str, usize> = vocab
        .word_pieces
        .iter()
        .enumerate()
        .map(|(i, w)| (w.as_str(), i))
        .collect();
    let slot_index: HashMap<&str, usize> = vocab
        .slot_tags
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let intent_index: HashMap<&str, usize> = vocab
        .intents
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let codebook: Vec<Vec<f64>> = (0..vocab.n_wp())
        .map(|_| {
            (0..RAW_FEATURE_DIM)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect()
        })
        .collect();

    let other = vocab.other_slot();
    let mut utterances = Vec::with_capacity(n);
    for _ in 0..n {
        let template = &grammar.templates[rng.random_range(0..grammar.templates.len())];
        let mut tokens = Vec::new();
        let mut slots = Vec::new();
        for token in template.pattern.split_whitespace() {
            match placeholder_tag(token) {
                Some(tag) => {
                    let fillers = &grammar.fillers[tag];
                    let filler = &fillers[rng.random_range(0..fillers.len())];
                    for part in filler.split_whitespace() {
                        tokens.push(wp_index[part]);
                        slots.push(slot_index[tag]);
                    }
                }
                None => {
                    tokens.push(wp_index[token]);
                    slots.push(other);
                }
            }
        }
        let intent = intent_index[template.intent.as_str()];

        let t_raw = tokens.len() * grammar.frames_per_token;
        let mut values = Vec::with_capacity(t_raw * RAW_FEATURE_DIM);
        for &token in &tokens {
            for _ in 0..grammar.frames_per_token {
                for &base in &codebook[token] {
                    let mut v = base;
                    if grammar.noise_sigma > 0.0 {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        v += grammar.noise_sigma * z;
                    }
                    values.push(v);
                }
            }
        }
        let features =
            Tensor::new(vec![t_raw, RAW_FEATURE_DIM], values).expect("counted feature rows");
        utterances.push(Utterance {
            features,
            tokens,
            slots,
            intent,
        });
    }
    Ok((utterances, vocab))
}

/// Stacks each frame with its two left neighbours and downsamples by 3.
///
/// Output frame t (1-based) anchors at input frame j = min(3t, T_raw) and
/// concatenates rows [j-2, j-1, j]; indices below 1 repeat the first frame.
/// T = ceil(T_raw / 3), width triples.
pub fn feature_pipeline(features: &Tensor) -> Result<Tensor, DataError> {
    if features.rank() != 2 || features.shape()[0] == 0 {
        return Err(DataError::EmptyFeatures);
    }
    let t_raw = features.shape()[0];
    let dim = features.shape()[1];
    let t_out = t_raw.div_ceil(STACK_FACTOR);
    let mut values = Vec::with_capacity(t_out * dim * STACK_FACTOR);
    for t in 1..=t_out {
        let anchor = (STACK_FACTOR * t).min(t_raw);
        for offset in [2usize, 1, 0] {
            let j = anchor.saturating_sub(offset).max(1);
            values.extend_from_slice(features.row(j - 1));
        }
    }
    Ok(Tensor::new(vec![t_out, dim * STACK_FACTOR], values).expect("counted rows"))
}

#[derive(Serialize, Deserialize)]
struct DatasetRecord {
    tokens: Vec<String>,
    slots: Vec<String>,
    intent: String,
    features: Vec<Vec<f64>>,
}

/// Writes one JSON record per line with symbolic labels and raw features.
pub fn save_dataset(
    path: &Path,
    utterances: &[Utterance],
    vocab: &Vocabulary,
) -> Result<(), DataError> {
    let mut out = Vec::new();
    for u in utterances {
        let record = DatasetRecord {
            tokens: u.tokens.iter().map(|&i| vocab.word_pieces[i].clone()).collect(),
            slots: u.slots.iter().map(|&i| vocab.slot_tags[i].clone()).collect(),
            intent: vocab.intents[u.intent].clone(),
            features: u
                .features
                .values()
                .chunks(u.features.shape()[1])
                .map(|row| row.to_vec())
                .collect(),
        };
        serde_json::to_writer(&mut out, &record).expect("record serializes");
        out.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    file.write_all(&out).map_err(|e| io_err(path, e))
}

/// Reads a JSONL dataset, resolving symbols against `vocab`. Errors carry
/// the 1-based line number.
pub fn load_dataset(path: &Path, vocab: &Vocabulary) -> Result<Vec<Utterance>, DataError> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    let mut utterances = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DatasetRecord = serde_json::from_str(&line)
            .map_err(|e| DataError::MalformedLine {
                line: line_no,
                source: e,
            })?;
        if record.tokens.len() != record.slots.len() {
            return Err(DataError::LengthMismatch {
                line: line_no,
                tokens: record.tokens.len(),
                slots: record.slots.len(),
            });
        }
        let lookup = |list: &[String], symbol: &str, kind: &'static str| {
            list.iter()
                .position(|s| s == symbol)
                .ok_or_else(|| DataError::UnknownSymbol {
                    line: line_no,
                    kind,
                    symbol: symbol.to_string(),
                })
        };
        let tokens = record
            .tokens
            .iter()
            .map(|t| lookup(&vocab.word_pieces, t, "token"))
            .collect::<Result<Vec<_>, _>>()?;
        let slots = record
            .slots
            .iter()
            .map(|s| lookup(&vocab.slot_tags, s, "slot"))
            .collect::<Result<Vec<_>, _>>()?;
        let intent = lookup(&vocab.intents, &record.intent, "intent")?;

        let rows = record.features.len();
        let dim = record.features.first().map_or(RAW_FEATURE_DIM, Vec::len);
        let mut values = Vec::with_capacity(rows * dim);
        for (r, row) in record.features.iter().enumerate() {
            if row.len() != dim {
                return Err(DataError::RaggedFeatures {
                    line: line_no,
                    row: r,
                    got: row.len(),
                    expected: dim,
                });
            }
            values.extend_from_slice(row);
        }
        let features = Tensor::new(vec![rows, dim], values).expect("counted rows");
        utterances.push(Utterance {
            features,
            tokens,
            slots,
            intent,
        });
    }
    Ok(utterances)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn appliance_grammar() -> GrammarSpec {
        let mut fillers = BTreeMap::new();
        fillers.insert(
            "DeviceLocation".to_string(),
            vec!["kitchen".to_string()],
        );
        fillers.insert("ApplianceType".to_string(), vec!["light".to_string()]);
        GrammarSpec {
            templates: vec![Template {
                pattern: "turn on the <DeviceLocation> <ApplianceType>".to_string(),
                intent: "TurnOnApplianceIntent".to_string(),
            }],
            fillers,
            frames_per_token: 4,
            noise_sigma: 0.0,
        }
    }

    #[test]
    fn single_template_fills_slots_and_intent() {
        let (utts, vocab) = generate_corpus(&appliance_grammar(), 1, 7).unwrap();
        let u = &utts[0];
        let tokens: Vec<&str> = u
            .tokens
            .iter()
            .map(|&i| vocab.word_pieces[i].as_str())
            .collect();
        let slots: Vec<&str> = u
            .slots
            .iter()
            .map(|&i| vocab.slot_tags[i].as_str())
            .collect();
        assert_eq!(tokens, vec!["turn", "on", "the", "kitchen", "light"]);
        assert_eq!(
            slots,
            vec!["Other", "Other", "Other", "DeviceLocation", "ApplianceType"]
        );
        assert_eq!(vocab.intents[u.intent], "TurnOnApplianceIntent");
    }

    #[test]
    fn five_tokens_at_four_frames_each_give_twenty_rows() {
        let (utts, _) = generate_corpus(&appliance_grammar(), 1, 7).unwrap();
        assert_eq!(utts[0].features.shape(), &[20, RAW_FEATURE_DIM]);
    }

    #[test]
    fn same_seed_reproduces_the_corpus() {
        let mut grammar = appliance_grammar();
        grammar.noise_sigma = 0.25;
        let a = generate_corpus(&grammar, 5, 99).unwrap();
        let b = generate_corpus(&grammar, 5, 99).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        let c = generate_corpus(&grammar, 5, 100).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn zero_noise_repeats_codebook_rows_exactly() {
        let (utts, _) = generate_corpus(&appliance_grammar(), 2, 11).unwrap();
        for u in &utts {
            let fpt = 4;
            for (k, &token) in u.tokens.iter().enumerate() {
                let first = u.features.row(k * fpt).to_vec();
                for f in 1..fpt {
                    assert_eq!(u.features.row(k * fpt + f), &first[..]);
                }
                // Same token elsewhere in the corpus shares the signature.
                for v in &utts {
                    for (k2, &t2) in v.tokens.iter().enumerate() {
                        if t2 == token {
                            assert_eq!(v.features.row(k2 * fpt), &first[..]);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn vocabulary_reserves_bos_and_contains_other() {
        let (_, vocab) = generate_corpus(&appliance_grammar(), 1, 7).unwrap();
        assert_eq!(vocab.word_pieces[0], BOS_SYMBOL);
        assert_eq!(vocab.slot_tags[0], BOS_SYMBOL);
        assert_eq!(vocab.slot_tags[1], OTHER_TAG);
        assert_eq!(vocab.blank_wp(), vocab.word_pieces.len());
        assert_eq!(vocab.blank_slot(), vocab.slot_tags.len());
    }

    #[test]
    fn empty_grammar_is_rejected() {
        let grammar = GrammarSpec {
            templates: vec![],
            fillers: BTreeMap::new(),
            frames_per_token: 1,
            noise_sigma: 0.0,
        };
        assert!(matches!(
            generate_corpus(&grammar, 1, 0),
            Err(DataError::EmptyGrammar)
        ));
    }

    #[test]
    fn placeholder_without_fillers_is_rejected() {
        let grammar = GrammarSpec {
            templates: vec![Template {
                pattern: "play <ArtistName>".to_string(),
                intent: "PlayMusicIntent".to_string(),
            }],
            fillers: BTreeMap::new(),
            frames_per_token: 1,
            noise_sigma: 0.0,
        };
        let err = generate_corpus(&grammar, 1, 0).unwrap_err();
        assert!(err.to_string().contains("ArtistName"), "{err}");
    }

    #[test]
    fn pipeline_stacks_nine_frames_into_three() {
        let rows: Vec<f64> = (0..9).flat_map(|r| vec![r as f64; 4]).collect();
        let input = Tensor::new(vec![9, 4], rows).unwrap();
        let out = feature_pipeline(&input).unwrap();
        assert_eq!(out.shape(), &[3, 12]);
        // Frame 1 stacks input rows 1..3, frame 2 rows 4..6, frame 3 rows 7..9.
        assert_eq!(out.row(0), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
        assert_eq!(out.row(1), &[3.0, 3.0, 3.0, 3.0, 4.0, 4.0, 4.0, 4.0, 5.0, 5.0, 5.0, 5.0]);
        assert_eq!(out.row(2), &[6.0, 6.0, 6.0, 6.0, 7.0, 7.0, 7.0, 7.0, 8.0, 8.0, 8.0, 8.0]);
    }

    #[test]
    fn pipeline_pads_a_single_frame_three_times() {
        let input = Tensor::new(vec![1, 2], vec![5.0, 6.0]).unwrap();
        let out = feature_pipeline(&input).unwrap();
        assert_eq!(out.shape(), &[1, 6]);
        assert_eq!(out.row(0), &[5.0, 6.0, 5.0, 6.0, 5.0, 6.0]);
    }

    #[test]
    fn pipeline_rounds_four_frames_up_to_two() {
        let rows: Vec<f64> = (0..4).flat_map(|r| vec![r as f64]).collect();
        let input = Tensor::new(vec![4, 1], rows).unwrap();
        let out = feature_pipeline(&input).unwrap();
        assert_eq!(out.shape(), &[2, 3]);
        assert_eq!(out.row(0), &[0.0, 1.0, 2.0]);
        // Final frame anchors at the last input row.
        assert_eq!(out.row(1), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn pipeline_triples_width_for_any_input() {
        for t_raw in 1..=10usize {
            for dim in [1usize, 3, 64] {
                let input = Tensor::full(vec![t_raw, dim], 0.5);
                let out = feature_pipeline(&input).unwrap();
                assert_eq!(out.shape(), &[t_raw.div_ceil(3), dim * 3]);
            }
        }
    }

    #[test]
    fn pipeline_rejects_empty_input() {
        let input = Tensor::zeros(vec![0, 4]);
        assert!(feature_pipeline(&input).is_err());
    }

    #[test]
    fn dataset_round_trip_is_lossless() {
        let mut grammar = appliance_grammar();
        grammar.noise_sigma = 0.3333333333333333;
        let (utts, vocab) = generate_corpus(&grammar, 4, 21).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        save_dataset(&path, &utts, &vocab).unwrap();
        let loaded = load_dataset(&path, &vocab).unwrap();
        assert_eq!(utts, loaded);
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let (utts, vocab) = generate_corpus(&appliance_grammar(), 2, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        save_dataset(&path, &utts, &vocab).unwrap();
        let mut text = fs::read_to_string(&path).unwrap();
        text.push_str("{not json\n");
        fs::write(&path, text).unwrap();
        let err = load_dataset(&path, &vocab).unwrap_err();
        assert!(err.to_string().starts_with("line 3:"), "{err}");
    }

    #[test]
    fn unknown_intent_is_named_in_the_error() {
        let (utts, vocab) = generate_corpus(&appliance_grammar(), 1, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        save_dataset(&path, &utts, &vocab).unwrap();
        let text = fs::read_to_string(&path)
            .unwrap()
            .replace("TurnOnApplianceIntent", "NoSuchIntent");
        fs::write(&path, text).unwrap();
        let err = load_dataset(&path, &vocab).unwrap_err();
        assert!(err.to_string().contains("NoSuchIntent"), "{err}");
    }

    #[test]
    fn token_slot_length_mismatch_is_rejected() {
        let (utts, vocab) = generate_corpus(&appliance_grammar(), 1, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        save_dataset(&path, &utts, &vocab).unwrap();
        let text = fs::read_to_string(&path)
            .unwrap()
            .replace("\"slots\":[\"Other\",", "\"slots\":[");
        fs::write(&path, text).unwrap();
        let err = load_dataset(&path, &vocab).unwrap_err();
        assert!(matches!(err, DataError::LengthMismatch { line: 1, .. }), "{err}");
    }

    #[test]
    fn duplicate_vocabulary_entries_are_rejected() {
        let err = Vocabulary::new(
            vec!["<s>".into(), "a".into(), "a".into()],
            vec!["<s>".into(), "Other".into()],
            vec!["X".into()],
        )
        .unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn missing_other_tag_is_rejected() {
        let err = Vocabulary::new(
            vec!["<s>".into(), "a".into()],
            vec!["<s>".into(), "Else".into()],
            vec!["X".into()],
        )
        .unwrap_err();
        assert!(err.to_string().contains("Other"), "{err}");
    }

    #[test]
    fn multi_token_fillers_tag_every_token() {
        let mut fillers = BTreeMap::new();
        fillers.insert(
            "ArtistName".to_string(),
            vec!["the rolling stones".to_string()],
        );
        let grammar = GrammarSpec {
            templates: vec![Template {
                pattern: "play <ArtistName>".to_string(),
                intent: "PlayMusicIntent".to_string(),
            }],
            fillers,
            frames_per_token: 2,
            noise_sigma: 0.0,
        };
        let (utts, vocab) = generate_corpus(&grammar, 1, 5).unwrap();
        let slots: Vec<&str> = utts[0]
            .slots
            .iter()
            .map(|&i| vocab.slot_tags[i].as_str())
            .collect();
        assert_eq!(slots, vec!["Other", "ArtistName", "ArtistName", "ArtistName"]);
        assert_eq!(utts[0].features.shape()[0], 8);
    }
}
