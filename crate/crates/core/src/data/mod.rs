//! Multi-task data construction: aspect-level instances, tokenization,
//! prompt templates, corpus ingestion, synthetic corpus generation and the
//! pluggable rationale provider.

mod rationale;
mod synth;
mod vocab;

pub use rationale::{
    http_backend_from_env, HttpBackend, Rationale, RationaleBackend, RationaleError,
    RationaleProvider, ENV_LLM_ENDPOINT, ENV_LLM_KEY,
};
pub use synth::{synth_corpus, template_table, SynthTemplate, SENTIMENT_LEXICON};
pub use vocab::{detokenize, tokenize, tokenize_words, Vocabulary, EOS_ID, PAD_ID, UNK_ID};

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::moe::TaskId;

/// Maximum rationale target length in tokens.
pub const MAX_RATIONALE_TOKENS: usize = 48;

/// Fraction of instances reserved for validation.
pub const VALIDATION_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
    Neutral,
}

impl Polarity {
    pub const ALL: [Polarity; 3] = [Polarity::Positive, Polarity::Negative, Polarity::Neutral];

    pub fn label(self) -> &'static str {
        match self {
            Polarity::Positive => "positive",
            Polarity::Negative => "negative",
            Polarity::Neutral => "neutral",
        }
    }

    pub fn from_label(s: &str) -> Option<Polarity> {
        match s {
            "positive" => Some(Polarity::Positive),
            "negative" => Some(Polarity::Negative),
            "neutral" => Some(Polarity::Neutral),
            _ => None,
        }
    }
}

impl std::fmt::Display for Polarity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// One aspect-level record: sentence, aspect term, gold polarity,
/// implicitness indicator and (possibly empty) rationale.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotatedInstance {
    pub text: String,
    pub aspect: String,
    pub polarity: Polarity,
    pub implicit: bool,
    pub rationale: String,
}

impl AnnotatedInstance {
    pub fn validate(&self) -> Result<(), String> {
        if self.aspect.is_empty() {
            return Err("aspect is empty".into());
        }
        if !self.text.contains(&self.aspect) {
            return Err(format!(
                "aspect {:?} does not occur in text {:?}",
                self.aspect, self.text
            ));
        }
        Ok(())
    }
}

/// Wire form of an instance in the dataset JSONL.
#[derive(Debug, Serialize, Deserialize)]
struct InstanceRecord {
    text: String,
    aspect: String,
    polarity: String,
    implicit: u8,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    rationale: String,
}

/// A tokenized (prompt, target, task) triple derived from one instance.
#[derive(Debug, Clone)]
pub struct TaskExample {
    pub task: TaskId,
    pub prompt_tokens: Vec<usize>,
    pub target_tokens: Vec<usize>,
    /// Index of the source instance in its corpus.
    pub source: usize,
}

/// Fixed prompt templates; the `task:` prefix keeps prompts of different
/// tasks distinct for the same instance.
pub fn pol_prompt(inst: &AnnotatedInstance) -> String {
    format!(
        "task: polarity | sentence: {} | aspect: {}",
        inst.text, inst.aspect
    )
}

pub fn imp_prompt(inst: &AnnotatedInstance) -> String {
    format!(
        "task: implicitness | sentence: {} | aspect: {}",
        inst.text, inst.aspect
    )
}

pub fn rea_prompt(inst: &AnnotatedInstance) -> String {
    format!(
        "task: rationale | sentence: {} | aspect: {} | polarity: {}",
        inst.text,
        inst.aspect,
        inst.polarity.label()
    )
}

pub fn imp_target(inst: &AnnotatedInstance) -> &'static str {
    if inst.implicit {
        "implicit"
    } else {
        "explicit"
    }
}

/// Expands one instance into its task examples: POL and IMP always, REA only
/// when the rationale is nonempty. Returns the examples and whether the REA
/// example was dropped.
pub fn build_task_examples(
    inst: &AnnotatedInstance,
    source: usize,
    vocab: &Vocabulary,
) -> (Vec<TaskExample>, bool) {
    let mut out = Vec::with_capacity(3);
    out.push(TaskExample {
        task: TaskId::Pol,
        prompt_tokens: tokenize(&pol_prompt(inst), vocab),
        target_tokens: vocab.encode_target(inst.polarity.label()),
        source,
    });
    out.push(TaskExample {
        task: TaskId::Imp,
        prompt_tokens: tokenize(&imp_prompt(inst), vocab),
        target_tokens: vocab.encode_target(imp_target(inst)),
        source,
    });
    let dropped = inst.rationale.is_empty();
    if !dropped {
        let mut target = vocab.encode_target(&inst.rationale);
        if target.len() > MAX_RATIONALE_TOKENS + 1 {
            target.truncate(MAX_RATIONALE_TOKENS);
            target.push(EOS_ID);
        }
        out.push(TaskExample {
            task: TaskId::Rea,
            prompt_tokens: tokenize(&rea_prompt(inst), vocab),
            target_tokens: target,
            source,
        });
    }
    (out, dropped)
}

/// Expands a corpus into per-task example lists, counting dropped rationales.
pub fn build_all_examples(
    instances: &[AnnotatedInstance],
    vocab: &Vocabulary,
) -> (BTreeMap<TaskId, Vec<TaskExample>>, usize) {
    let mut per_task: BTreeMap<TaskId, Vec<TaskExample>> = BTreeMap::new();
    for task in TaskId::ALL {
        per_task.insert(task, Vec::new());
    }
    let mut dropped = 0usize;
    for (i, inst) in instances.iter().enumerate() {
        let (examples, was_dropped) = build_task_examples(inst, i, vocab);
        if was_dropped {
            dropped += 1;
        }
        for ex in examples {
            per_task.get_mut(&ex.task).expect("all tasks present").push(ex);
        }
    }
    if dropped > 0 {
        log::warn!("{dropped} instances had empty rationales; their REA examples were dropped");
    }
    (per_task, dropped)
}

/// All corpus word streams used to build the vocabulary: every prompt and
/// every target an instance can produce.
pub fn corpus_words(instances: &[AnnotatedInstance]) -> Vec<String> {
    let mut words = Vec::new();
    for inst in instances {
        for text in [
            pol_prompt(inst),
            imp_prompt(inst),
            rea_prompt(inst),
            inst.polarity.label().to_string(),
            imp_target(inst).to_string(),
            inst.rationale.clone(),
        ] {
            words.extend(tokenize_words(&text));
        }
    }
    words
}

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{count} malformed line(s), first: line {first_line}: {first_message}")]
    MalformedLines {
        count: usize,
        first_line: usize,
        first_message: String,
    },
}

/// One rejected JSONL line.
#[derive(Debug, Clone, Serialize)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

/// Result of loading a dataset file: valid instances plus a report of
/// rejected lines with their line numbers.
#[derive(Debug)]
pub struct LoadOutcome {
    pub instances: Vec<AnnotatedInstance>,
    pub errors: Vec<LineError>,
}

/// Loads instances from a JSONL file, collecting malformed lines instead of
/// aborting on the first error.
pub fn load_jsonl(path: &Path) -> Result<LoadOutcome, DataError> {
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = std::io::BufReader::new(file);
    let mut outcome = LoadOutcome {
        instances: Vec::new(),
        errors: Vec::new(),
    };
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_instance_line(&line) {
            Ok(inst) => outcome.instances.push(inst),
            Err(message) => outcome.errors.push(LineError {
                line: line_no,
                message,
            }),
        }
    }
    Ok(outcome)
}

fn parse_instance_line(line: &str) -> Result<AnnotatedInstance, String> {
    let record: InstanceRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let polarity = Polarity::from_label(&record.polarity)
        .ok_or_else(|| format!("polarity {:?} not in label set", record.polarity))?;
    let implicit = match record.implicit {
        0 => false,
        1 => true,
        other => return Err(format!("implicit must be 0 or 1, got {other}")),
    };
    let inst = AnnotatedInstance {
        text: record.text,
        aspect: record.aspect,
        polarity,
        implicit,
        rationale: record.rationale,
    };
    inst.validate()?;
    Ok(inst)
}

/// Serializes instances to JSONL, one object per line.
pub fn save_jsonl(path: &Path, instances: &[AnnotatedInstance]) -> Result<(), DataError> {
    let mut file = std::fs::File::create(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    for inst in instances {
        let record = InstanceRecord {
            text: inst.text.clone(),
            aspect: inst.aspect.clone(),
            polarity: inst.polarity.label().to_string(),
            implicit: u8::from(inst.implicit),
            rationale: inst.rationale.clone(),
        };
        let json = serde_json::to_string(&record).expect("serializable record");
        writeln!(file, "{json}").map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
    }
    Ok(())
}

/// Seeded shuffle split reserving `VALIDATION_FRACTION` for validation.
pub fn split_train_val(
    instances: &[AnnotatedInstance],
    seed: u64,
) -> (Vec<AnnotatedInstance>, Vec<AnnotatedInstance>) {
    let mut order: Vec<usize> = (0..instances.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_val = ((instances.len() as f64) * VALIDATION_FRACTION).round() as usize;
    let (val_idx, train_idx) = order.split_at(n_val.min(instances.len()));
    let mut train: Vec<usize> = train_idx.to_vec();
    let mut val: Vec<usize> = val_idx.to_vec();
    train.sort_unstable();
    val.sort_unstable();
    (
        train.iter().map(|&i| instances[i].clone()).collect(),
        val.iter().map(|&i| instances[i].clone()).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn soup() -> AnnotatedInstance {
        AnnotatedInstance {
            text: "the soup was cold".into(),
            aspect: "soup".into(),
            polarity: Polarity::Negative,
            implicit: true,
            rationale: "the reviewer is unhappy".into(),
        }
    }

    #[test]
    fn templates_apply() {
        let inst = soup();
        let vocab = Vocabulary::build(corpus_words(&[inst.clone()]).iter().map(|s| s.as_str()));
        let (examples, dropped) = build_task_examples(&inst, 0, &vocab);
        assert!(!dropped);
        assert_eq!(examples.len(), 3);
        let pol = &examples[0];
        assert_eq!(detokenize(&pol.target_tokens, &vocab), "negative");
        let imp = &examples[1];
        assert_eq!(detokenize(&imp.target_tokens, &vocab), "implicit");
        assert_eq!(
            detokenize(&pol.prompt_tokens, &vocab),
            "task: polarity | sentence: the soup was cold | aspect: soup"
        );
    }

    #[test]
    fn explicit_flag_maps_to_target() {
        let mut inst = soup();
        inst.implicit = false;
        assert_eq!(imp_target(&inst), "explicit");
    }

    #[test]
    fn empty_rationale_drops_only_rea() {
        let mut inst = soup();
        inst.rationale.clear();
        let vocab = Vocabulary::build(corpus_words(&[inst.clone()]).iter().map(|s| s.as_str()));
        let (examples, dropped) = build_task_examples(&inst, 0, &vocab);
        assert!(dropped);
        assert_eq!(examples.len(), 2);
        assert!(examples.iter().all(|e| e.task != TaskId::Rea));
    }

    #[test]
    fn prompts_of_distinct_tasks_differ() {
        let inst = soup();
        let prompts = [pol_prompt(&inst), imp_prompt(&inst), rea_prompt(&inst)];
        for i in 0..3 {
            for j in (i + 1)..3 {
                assert_ne!(prompts[i], prompts[j]);
            }
        }
    }

    #[test]
    fn rationale_targets_truncate() {
        let mut inst = soup();
        inst.rationale = vec!["word"; 100].join(" ");
        let vocab = Vocabulary::build(corpus_words(&[inst.clone()]).iter().map(|s| s.as_str()));
        let (examples, _) = build_task_examples(&inst, 0, &vocab);
        let rea = examples.iter().find(|e| e.task == TaskId::Rea).unwrap();
        assert_eq!(rea.target_tokens.len(), MAX_RATIONALE_TOKENS + 1);
        assert_eq!(*rea.target_tokens.last().unwrap(), EOS_ID);
    }

    #[test]
    fn jsonl_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");

        // empty file -> empty list, zero errors
        std::fs::write(&path, "").unwrap();
        let out = load_jsonl(&path).unwrap();
        assert!(out.instances.is_empty() && out.errors.is_empty());

        let fixture = vec![
            soup(),
            AnnotatedInstance {
                text: "great battery life".into(),
                aspect: "battery".into(),
                polarity: Polarity::Positive,
                implicit: false,
                rationale: String::new(),
            },
        ];
        save_jsonl(&path, &fixture).unwrap();
        let out = load_jsonl(&path).unwrap();
        assert!(out.errors.is_empty());
        assert_eq!(out.instances, fixture);

        // field-exact round-trip on re-serialization
        let path2 = dir.path().join("data2.jsonl");
        save_jsonl(&path2, &out.instances).unwrap();
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            std::fs::read_to_string(&path2).unwrap()
        );

        // malformed lines carry line numbers
        std::fs::write(
            &path,
            concat!(
                "{\"text\":\"fine soup\",\"aspect\":\"soup\",\"polarity\":\"positive\",\"implicit\":0}\n",
                "{\"text\":\"x\",\"polarity\":\"positive\",\"implicit\":0}\n",
                "{\"text\":\"x\",\"aspect\":\"y\",\"polarity\":\"positive\",\"implicit\":0}\n",
                "{\"text\":\"x y\",\"aspect\":\"y\",\"polarity\":\"meh\",\"implicit\":0}\n",
            ),
        )
        .unwrap();
        let out = load_jsonl(&path).unwrap();
        assert_eq!(out.instances.len(), 1);
        assert_eq!(out.errors.len(), 3);
        assert_eq!(out.errors[0].line, 2);
        assert!(out.errors[0].message.contains("aspect"));
        assert_eq!(out.errors[1].line, 3);
        assert!(out.errors[1].message.contains("does not occur"));
        assert_eq!(out.errors[2].line, 4);
        assert!(out.errors[2].message.contains("polarity"));
    }

    #[test]
    fn split_is_seeded_and_sized() {
        let corpus = synth_corpus(60, 5);
        let (train_a, val_a) = split_train_val(&corpus, 11);
        let (train_b, val_b) = split_train_val(&corpus, 11);
        assert_eq!(train_a, train_b);
        assert_eq!(val_a, val_b);
        assert_eq!(val_a.len(), 6);
        assert_eq!(train_a.len(), 54);
        let (train_c, _) = split_train_val(&corpus, 12);
        assert_ne!(train_a, train_c);
    }
}
