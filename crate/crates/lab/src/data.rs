//! Synthetic sequence tasks.
//!
//! Token layout for a vocabulary of `V`: data symbols are `0..V-2`, the
//! separator is `V-2` and `V-1` is reserved for padding. Every sequence is
//! `prompt SEP target`:
//!
//! * copy: the target repeats the prompt,
//! * reverse: the target is the prompt reversed,
//! * modadd: the target is one token, the prompt sum modulo the number of
//!   data symbols.
//!
//! Dataset files hold one sequence per line as space-separated token ids.
//! Held-out prompts are selected by a hash of the prompt tokens, so the
//! training stream and the evaluation set can never share a prompt.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tiermoe_core::model::mix_key;
use tiermoe_core::train::Batch;

use crate::error::{LabError, LabResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[default]
    Copy,
    Reverse,
    Modadd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenLayout {
    /// Number of data symbols `M`.
    pub symbols: usize,
    pub sep: usize,
    pub pad: usize,
}

impl TokenLayout {
    pub fn for_vocab(vocab: usize) -> LabResult<Self> {
        if vocab < 4 {
            return Err(LabError::Config(format!(
                "model.vocab_size: tasks need at least 4 tokens, got {vocab}"
            )));
        }
        Ok(TokenLayout {
            symbols: vocab - 2,
            sep: vocab - 2,
            pad: vocab - 1,
        })
    }
}

impl Task {
    pub fn target(self, prompt: &[usize], layout: &TokenLayout) -> Vec<usize> {
        match self {
            Task::Copy => prompt.to_vec(),
            Task::Reverse => prompt.iter().rev().copied().collect(),
            Task::Modadd => vec![prompt.iter().sum::<usize>() % layout.symbols],
        }
    }

    pub fn target_len(self, prompt_len: usize) -> usize {
        match self {
            Task::Modadd => 1,
            _ => prompt_len,
        }
    }

    pub fn sequence(self, prompt: &[usize], layout: &TokenLayout) -> Vec<usize> {
        let mut s = prompt.to_vec();
        s.push(layout.sep);
        s.extend(self.target(prompt, layout));
        s
    }
}

/// Whether a prompt belongs to the held-out split (one in `every`).
pub fn is_held_out(prompt: &[usize], every: u64) -> bool {
    let words: Vec<u64> = prompt.iter().map(|&t| t as u64).collect();
    mix_key(&words) % every == 0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub prompt_len: usize,
    pub batch_size: usize,
    /// Number of held-out sequences.
    pub eval_size: usize,
    pub eval_batch_size: usize,
    /// One prompt in `holdout_every` is reserved for evaluation.
    pub holdout_every: u64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            prompt_len: 6,
            batch_size: 16,
            eval_size: 256,
            eval_batch_size: 32,
            holdout_every: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

/// Deterministic source of task sequences.
#[derive(Debug, Clone)]
pub struct TaskSampler {
    pub task: Task,
    pub layout: TokenLayout,
    pub prompt_len: usize,
    pub holdout_every: u64,
}

impl TaskSampler {
    pub fn new(task: Task, vocab: usize, data: &DataConfig) -> LabResult<Self> {
        if data.prompt_len == 0 || data.holdout_every < 2 {
            return Err(LabError::Config(
                "data.prompt_len must be positive and data.holdout_every at least 2".into(),
            ));
        }
        Ok(TaskSampler {
            task,
            layout: TokenLayout::for_vocab(vocab)?,
            prompt_len: data.prompt_len,
            holdout_every: data.holdout_every,
        })
    }

    /// Length of every sequence, separator included.
    pub fn seq_len(&self) -> usize {
        self.prompt_len + 1 + self.task.target_len(self.prompt_len)
    }

    /// Rejection-samples a prompt of `split`. Tiny prompt spaces may have
    /// no prompt in a split at all, so the number of draws is bounded.
    fn prompt(&self, rng: &mut ChaCha8Rng, split: Split) -> LabResult<Vec<usize>> {
        for _ in 0..1000 * self.holdout_every {
            let p: Vec<usize> = (0..self.prompt_len)
                .map(|_| rng.gen_range(0..self.layout.symbols))
                .collect();
            if is_held_out(&p, self.holdout_every) == (split == Split::Eval) {
                return Ok(p);
            }
        }
        Err(LabError::Data(format!(
            "no {split:?} prompt found among {}^{} prompts; increase data.prompt_len or the vocabulary",
            self.layout.symbols, self.prompt_len
        )))
    }

    pub fn sequences(&self, count: usize, seed: u64, split: Split) -> LabResult<Vec<Vec<usize>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                Ok(self
                    .task
                    .sequence(&self.prompt(&mut rng, split)?, &self.layout))
            })
            .collect()
    }

    pub fn batch(&self, seqs: &[Vec<usize>]) -> LabResult<Batch> {
        let from = vec![self.prompt_len + 1; seqs.len()];
        Ok(Batch::from_sequences(seqs, &from)?)
    }

    /// Training batch of step `step`, a pure function of `(seed, step)`.
    pub fn train_batch(&self, seed: u64, step: u64, size: usize) -> LabResult<Batch> {
        self.batch(&self.sequences(size, mix_key(&[seed, 0x7472, step]), Split::Train)?)
    }

    pub fn eval_batches(&self, seed: u64, size: usize, batch_size: usize) -> LabResult<Vec<Batch>> {
        let seqs = self.sequences(size, mix_key(&[seed, 0x6576]), Split::Eval)?;
        seqs.chunks(batch_size.max(1))
            .map(|c| self.batch(c))
            .collect()
    }
}

pub fn format_sequence(seq: &[usize]) -> String {
    seq.iter()
        .map(|t| t.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn parse_sequences(text: &str) -> LabResult<Vec<Vec<usize>>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.split_whitespace()
                .map(|t| {
                    t.parse::<usize>()
                        .map_err(|_| LabError::Data(format!("line {}: bad token {t:?}", i + 1)))
                })
                .collect()
        })
        .collect()
}

/// Generated dataset files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub task: Task,
    pub vocab_size: usize,
    pub separator: usize,
    pub prompt_len: usize,
    pub seed: u64,
    pub train_size: usize,
    pub eval_size: usize,
    pub holdout_every: u64,
}

/// Writes `train.txt` (`size` lines), `eval.txt` and `manifest.json` to
/// `dir`.
pub fn generate_dataset(
    task: Task,
    size: usize,
    eval_size: usize,
    seed: u64,
    vocab: usize,
    data: &DataConfig,
    dir: &Path,
) -> LabResult<DatasetManifest> {
    if size == 0 {
        return Err(LabError::Config("dataset size must be at least 1".into()));
    }
    let sampler = TaskSampler::new(task, vocab, data)?;
    fs::create_dir_all(dir)?;
    for (name, count, split, key) in [
        ("train.txt", size, Split::Train, 1),
        ("eval.txt", eval_size, Split::Eval, 2),
    ] {
        let mut w = BufWriter::new(fs::File::create(dir.join(name))?);
        for s in sampler.sequences(count, mix_key(&[seed, key]), split)? {
            writeln!(w, "{}", format_sequence(&s))?;
        }
        w.flush()?;
    }
    let manifest = DatasetManifest {
        task,
        vocab_size: vocab,
        separator: sampler.layout.sep,
        prompt_len: data.prompt_len,
        seed,
        train_size: size,
        eval_size,
        holdout_every: data.holdout_every,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sampler(task: Task) -> TaskSampler {
        TaskSampler::new(task, 12, &DataConfig::default()).unwrap()
    }

    #[test]
    fn task_definitions() {
        let l = TokenLayout::for_vocab(12).unwrap();
        assert_eq!((l.symbols, l.sep, l.pad), (10, 10, 11));
        assert_eq!(
            Task::Copy.sequence(&[3, 1, 4], &l),
            vec![3, 1, 4, 10, 3, 1, 4]
        );
        assert_eq!(
            Task::Reverse.sequence(&[3, 1, 4], &l),
            vec![3, 1, 4, 10, 4, 1, 3]
        );
        assert_eq!(Task::Modadd.sequence(&[3, 9, 4], &l), vec![3, 9, 4, 10, 6]);
        assert!(TokenLayout::for_vocab(3).is_err());
    }

    #[test]
    fn modadd_targets() {
        let s = sampler(Task::Modadd);
        for seq in s.sequences(200, 3, Split::Train).unwrap() {
            let (prompt, rest) = seq.split_at(6);
            assert_eq!(rest[0], 10);
            let mut acc = 0;
            for &t in prompt {
                acc = (acc + t) % 10;
            }
            assert_eq!(rest[1], acc);
        }
    }

    #[test]
    fn splits_are_disjoint() {
        let s = sampler(Task::Copy);
        let train: std::collections::HashSet<Vec<usize>> = (0..50)
            .flat_map(|step| s.sequences(16, step, Split::Train).unwrap())
            .collect();
        let eval = s.sequences(300, 99, Split::Eval).unwrap();
        assert!(eval.iter().all(|e| !train.contains(e)));
        assert!(eval.iter().all(|e| is_held_out(&e[..6], 10)));
    }

    #[test]
    fn batches_are_reproducible() {
        let s = sampler(Task::Reverse);
        let a = s.train_batch(1, 7, 4).unwrap();
        assert_eq!(a, s.train_batch(1, 7, 4).unwrap());
        assert_ne!(a, s.train_batch(1, 8, 4).unwrap());
        assert_eq!(a.seq, 12);
        assert_eq!(a.scored(), 4 * 6);
        let ev = s.eval_batches(1, 70, 32).unwrap();
        assert_eq!(
            ev.iter().map(|b| b.batch).collect::<Vec<_>>(),
            vec![32, 32, 6]
        );
    }

    #[test]
    fn dataset_files() {
        let dir = tempfile::tempdir().unwrap();
        let data = DataConfig::default();
        let m = generate_dataset(Task::Copy, 2, 3, 7, 12, &data, dir.path()).unwrap();
        assert_eq!(m.train_size, 2);
        let text = fs::read_to_string(dir.path().join("train.txt")).unwrap();
        let seqs = parse_sequences(&text).unwrap();
        assert_eq!(seqs.len(), 2);
        for s in &seqs {
            assert_eq!(s[6], 10);
            assert_eq!(&s[..6], &s[7..]);
        }
        let other = tempfile::tempdir().unwrap();
        generate_dataset(Task::Copy, 2, 3, 7, 12, &data, other.path()).unwrap();
        for f in ["train.txt", "eval.txt", "manifest.json"] {
            assert_eq!(
                fs::read(dir.path().join(f)).unwrap(),
                fs::read(other.path().join(f)).unwrap()
            );
        }
        assert!(parse_sequences("1 2 x").is_err());
        let one = DataConfig {
            prompt_len: 1,
            ..data
        };
        let tiny = TaskSampler::new(Task::Copy, 4, &one).unwrap();
        let held: Vec<bool> = [0, 1].iter().map(|&t| is_held_out(&[t], 10)).collect();
        if !held.contains(&true) {
            assert!(matches!(
                tiny.sequences(1, 0, Split::Eval),
                Err(LabError::Data(_))
            ));
        }
        assert!(generate_dataset(Task::Copy, 0, 1, 7, 12, &data, dir.path()).is_err());
    }
}
