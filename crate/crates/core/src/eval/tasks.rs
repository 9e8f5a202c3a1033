//! Seeded synthetic tasks and their JSON-lines file format.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demo {
    pub input: String,
    pub label: String,
}

/// One task record: demonstrations, the test input and its gold answer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskEpisode {
    pub demos: Vec<Demo>,
    pub test_input: String,
    pub gold: String,
}

/// Alphabets and lengths for key→value recall.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KvVocab {
    pub key_chars: String,
    pub value_chars: String,
    pub key_len: usize,
    pub value_len: usize,
}

impl Default for KvVocab {
    fn default() -> Self {
        KvVocab {
            key_chars: "abcdefghijklmnopqrstuvwxyz".into(),
            value_chars: "0123456789".into(),
            key_len: 2,
            value_len: 2,
        }
    }
}

impl KvVocab {
    fn draw(chars: &str, len: usize, rng: &mut impl Rng) -> String {
        let chars: Vec<char> = chars.chars().collect();
        (0..len)
            .map(|_| *chars.choose(rng).expect("non-empty alphabet"))
            .collect()
    }

    pub fn key(&self, rng: &mut impl Rng) -> String {
        Self::draw(&self.key_chars, self.key_len, rng)
    }

    pub fn value(&self, rng: &mut impl Rng) -> String {
        Self::draw(&self.value_chars, self.value_len, rng)
    }

    /// `pairs` key→value pairs with distinct keys.
    /// Number of distinct keys the vocabulary can form.
    pub fn distinct_keys(&self) -> usize {
        let chars = self.key_chars.chars().count();
        u32::try_from(self.key_len)
            .ok()
            .and_then(|l| chars.checked_pow(l))
            .unwrap_or(usize::MAX)
    }

    /// `pairs` key/value pairs with distinct keys.
    ///
    /// # Panics
    /// If `pairs` exceeds [`KvVocab::distinct_keys`].
    pub fn pairs(&self, pairs: usize, rng: &mut impl Rng) -> Vec<(String, String)> {
        assert!(
            pairs <= self.distinct_keys(),
            "{pairs} distinct keys requested from {}",
            self.distinct_keys()
        );
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(pairs);
        while out.len() < pairs {
            let k = self.key(rng);
            if seen.insert(k.clone()) {
                out.push((k, self.value(rng)));
            }
        }
        out
    }
}

/// `queries` recall episodes, each showing `pairs` demonstrations and asking
/// for the value of one of their keys.
pub fn gen_kv_recall(
    rng: &mut impl Rng,
    vocab: &KvVocab,
    pairs: usize,
    queries: usize,
) -> Vec<TaskEpisode> {
    assert!(pairs > 0, "recall needs at least one pair");
    (0..queries)
        .map(|_| {
            let kv = vocab.pairs(pairs, rng);
            let (key, value) = kv.choose(rng).expect("non-empty").clone();
            TaskEpisode {
                demos: kv
                    .into_iter()
                    .map(|(input, label)| Demo { input, label })
                    .collect(),
                test_input: key,
                gold: value,
            }
        })
        .collect()
}

/// Pretraining documents full of recall patterns: each document lists
/// `key value` paragraphs and then repeats keys it has already shown.
pub fn gen_kv_corpus(
    rng: &mut impl Rng,
    vocab: &KvVocab,
    docs: usize,
    pairs: usize,
    repeats: usize,
) -> Vec<Vec<String>> {
    (0..docs)
        .map(|_| {
            let kv = vocab.pairs(pairs, rng);
            let mut paras: Vec<String> = kv.iter().map(|(k, v)| format!("{k}{v}")).collect();
            for _ in 0..repeats {
                let (k, v) = kv.choose(rng).expect("non-empty");
                paras.push(format!("{k}{v}"));
            }
            paras
        })
        .collect()
}

pub const CLASS_LABELS: [&str; 2] = ["yes", "no"];

/// Two-class pattern task: does an `a`/`b` string hold more `a` than `b`?
/// Inputs have odd length so there is never a tie.
pub fn gen_toy_classify(rng: &mut impl Rng, episodes: usize, demos: usize) -> Vec<TaskEpisode> {
    let example = |rng: &mut dyn rand::RngCore| {
        let len = 2 * rng.random_range(1..4) + 1;
        let s: String = (0..len)
            .map(|_| if rng.random_bool(0.5) { 'a' } else { 'b' })
            .collect();
        let more_a = s.chars().filter(|c| *c == 'a').count() * 2 > len;
        let label = CLASS_LABELS[usize::from(!more_a)].to_owned();
        (s, label)
    };
    (0..episodes)
        .map(|_| {
            let mut ds: Vec<Demo> = (0..demos)
                .map(|_| {
                    let (input, label) = example(rng);
                    Demo { input, label }
                })
                .collect();
            ds.shuffle(rng);
            let (test_input, gold) = example(rng);
            TaskEpisode {
                demos: ds,
                test_input,
                gold,
            }
        })
        .collect()
}

/// The episode can be answered by looking its test input up among its
/// demonstrations: some demo carries that input with the gold label and no
/// demo contradicts it.
pub fn solvable_by_lookup(ep: &TaskEpisode) -> bool {
    let labels: Vec<&str> = ep
        .demos
        .iter()
        .filter(|d| d.input == ep.test_input)
        .map(|d| d.label.as_str())
        .collect();
    !labels.is_empty() && labels.iter().all(|l| *l == ep.gold)
}

pub fn write_tasks(w: &mut impl Write, episodes: &[TaskEpisode]) -> Result<()> {
    for ep in episodes {
        let line = serde_json::to_string(ep).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn read_tasks(r: impl BufRead) -> Result<Vec<TaskEpisode>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Parse(format!("task line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_pair_gold_is_its_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ep = &gen_kv_recall(&mut rng, &KvVocab::default(), 1, 1)[0];
        assert_eq!(ep.test_input, ep.demos[0].input);
        assert_eq!(ep.gold, ep.demos[0].label);
    }

    #[test]
    fn generation_is_seeded() {
        let gen = |s| {
            gen_kv_recall(
                &mut ChaCha8Rng::seed_from_u64(s),
                &KvVocab::default(),
                3,
                20,
            )
        };
        assert_eq!(gen(1), gen(1));
        assert_ne!(gen(1), gen(2));
        let cls = |s| gen_toy_classify(&mut ChaCha8Rng::seed_from_u64(s), 5, 2);
        assert_eq!(cls(3), cls(3));
    }

    #[test]
    fn classify_labels_follow_the_rule() {
        for ep in gen_toy_classify(&mut ChaCha8Rng::seed_from_u64(4), 50, 3) {
            for (input, label) in ep
                .demos
                .iter()
                .map(|d| (&d.input, &d.label))
                .chain([(&ep.test_input, &ep.gold)])
            {
                let a = input.chars().filter(|c| *c == 'a').count();
                assert_eq!(label == "yes", 2 * a > input.len());
            }
        }
    }

    #[test]
    fn corpus_repeats_shown_pairs() {
        let docs = gen_kv_corpus(
            &mut ChaCha8Rng::seed_from_u64(5),
            &KvVocab::default(),
            4,
            3,
            2,
        );
        for d in docs {
            assert_eq!(d.len(), 5);
            assert!(d[3..].iter().all(|p| d[..3].contains(p)));
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let eps = gen_kv_recall(&mut ChaCha8Rng::seed_from_u64(6), &KvVocab::default(), 2, 3);
        let mut buf = Vec::new();
        write_tasks(&mut buf, &eps).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap().lines().count(), 3);
        assert_eq!(read_tasks(&buf[..]).unwrap(), eps);
        assert!(matches!(read_tasks(&b"{oops"[..]), Err(Error::Parse(_))));
    }
}
