//! Seeded synthetic question/passage corpus and its line-oriented file
//! format.
//!
//! Vocabulary layout:
//!
//! | ids            | role                                        |
//! |----------------|---------------------------------------------|
//! | 1              | question marker                             |
//! | 8..16          | key tokens, one per question                |
//! | 16..24         | answer tokens, `answer(key) = key + 8`      |
//! | 64..vocab_size | filler                                      |
//!
//! A relevant passage contains the ordered bigram `(key, answer(key))`,
//! planted `1 + round(signal_strength * (max_copies - 1))` times. A
//! distractor carries, with probability `1 - signal_strength`, a decoy: the
//! same two tokens once each, never adjacent in that order. At
//! `signal_strength = 0` relevant passages and decoys share the same bag
//! of tokens, so only order distinguishes them.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{ApeError, Result};
use crate::numerics::Rng;

pub const QUESTION_MARKER: u32 = 1;
pub const KEY_BASE: u32 = 8;
pub const NUM_KEYS: u32 = 8;
pub const ANSWER_OFFSET: u32 = 8;
pub const FILLER_BASE: u32 = 64;

pub fn answer_token(key: u32) -> u32 {
    key + ANSWER_OFFSET
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Passage {
    pub rank: usize,
    pub tokens: Vec<u32>,
    pub has_answer: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuestionInstance {
    pub id: String,
    pub question: Vec<u32>,
    pub passages: Vec<Passage>,
}

impl QuestionInstance {
    pub fn num_passages(&self) -> usize {
        self.passages.len()
    }

    pub fn labels(&self) -> Vec<bool> {
        self.passages.iter().map(|p| p.has_answer).collect()
    }

    pub fn any_relevant(&self) -> bool {
        self.passages.iter().any(|p| p.has_answer)
    }

    /// Key token of a generated question (second question token).
    pub fn key(&self) -> Option<u32> {
        self.question.get(1).copied()
    }

    fn validate(&self) -> Result<()> {
        if self.passages.is_empty() {
            return Err(ApeError::Argument(format!("question {} has no passages", self.id)));
        }
        for (i, p) in self.passages.iter().enumerate() {
            if p.rank != i {
                return Err(ApeError::Argument(format!(
                    "question {}: passage ranks must be 0..N without gaps, found {} at position {i}",
                    self.id, p.rank
                )));
            }
        }
        Ok(())
    }
}

pub type Dataset = Vec<QuestionInstance>;

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub num_questions: usize,
    pub num_passages: usize,
    pub question_len: usize,
    pub passage_len: usize,
    /// Mean per-passage relevance probability.
    pub relevance_base: f64,
    /// Rank decay ρ in `[0, 1]`.
    pub rank_decay: f64,
    pub signal_strength: f64,
    pub max_copies: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            num_questions: 1000,
            num_passages: 20,
            question_len: 4,
            passage_len: 24,
            relevance_base: 0.1,
            rank_decay: 0.2,
            signal_strength: 0.5,
            max_copies: 8,
            vocab_size: 256,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ApeError::Config(m));
        if self.num_passages == 0 {
            return fail("gen.num_passages must be positive".into());
        }
        if self.question_len < 2 {
            return fail("gen.question_len must be at least 2 (marker and key)".into());
        }
        if self.passage_len < 2 {
            return fail("gen.passage_len must be at least 2".into());
        }
        if self.max_copies == 0 || self.max_copies > self.passage_len / 2 {
            return fail(format!(
                "gen.max_copies must be in 1..={}, got {}",
                self.passage_len / 2,
                self.max_copies
            ));
        }
        for (key, v) in [
            ("gen.relevance_base", self.relevance_base),
            ("gen.rank_decay", self.rank_decay),
            ("gen.signal_strength", self.signal_strength),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{key} must be in [0, 1], got {v}"));
            }
        }
        if self.vocab_size <= FILLER_BASE as usize {
            return fail(format!("gen.vocab_size must exceed {FILLER_BASE}"));
        }
        Ok(())
    }

    /// Relevance probability at retriever rank `n`: a linear tilt around
    /// `relevance_base`, `base * (1 + ρ (1 - 2n/(N-1)))`. The mean over
    /// ranks is `base`; ρ = 0 is rank-independent and ρ = 1 puts twice the
    /// base rate at the top rank and none at the bottom.
    pub fn relevance_prior(&self, rank: usize) -> f64 {
        let n = self.num_passages;
        let tilt = if n <= 1 {
            0.0
        } else {
            1.0 - 2.0 * rank as f64 / (n - 1) as f64
        };
        (self.relevance_base * (1.0 + self.rank_decay * tilt)).clamp(0.0, 1.0)
    }

    pub fn copies(&self) -> usize {
        1 + (self.signal_strength * (self.max_copies - 1) as f64).round() as usize
    }
}

fn filler(rng: &mut Rng, vocab: usize) -> u32 {
    FILLER_BASE + rng.below(vocab - FILLER_BASE as usize) as u32
}

pub fn generate(cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = Rng::seeded(cfg.seed);
    let copies = cfg.copies();
    let mut out = Vec::with_capacity(cfg.num_questions);
    for qi in 0..cfg.num_questions {
        let key = KEY_BASE + rng.below(NUM_KEYS as usize) as u32;
        let answer = answer_token(key);
        let mut question = vec![QUESTION_MARKER, key];
        question.extend((2..cfg.question_len).map(|_| filler(&mut rng, cfg.vocab_size)));

        let mut passages = Vec::with_capacity(cfg.num_passages);
        for rank in 0..cfg.num_passages {
            let relevant = rng.bernoulli(cfg.relevance_prior(rank));
            let mut tokens: Vec<u32> = (0..cfg.passage_len)
                .map(|_| filler(&mut rng, cfg.vocab_size))
                .collect();
            if relevant {
                let mut slots: Vec<usize> = (0..cfg.passage_len / 2).collect();
                rng.shuffle(&mut slots);
                for &slot in &slots[..copies] {
                    tokens[2 * slot] = key;
                    tokens[2 * slot + 1] = answer;
                }
            } else if rng.bernoulli(1.0 - cfg.signal_strength) {
                let k = rng.below(cfg.passage_len);
                let mut a = rng.below(cfg.passage_len - 1);
                if a >= k {
                    a += 1;
                }
                if a == k + 1 {
                    // would form the planted bigram; mirror it instead
                    tokens[a] = key;
                    tokens[k] = answer;
                } else {
                    tokens[k] = key;
                    tokens[a] = answer;
                }
            }
            passages.push(Passage {
                rank,
                tokens,
                has_answer: relevant,
            });
        }
        out.push(QuestionInstance {
            id: format!("q{qi}"),
            question,
            passages,
        });
    }
    Ok(out)
}

/// True if `tokens` contains the ordered pair `(key, answer(key))`.
pub fn contains_planted_bigram(tokens: &[u32], key: u32) -> bool {
    let answer = answer_token(key);
    tokens.windows(2).any(|w| w[0] == key && w[1] == answer)
}

fn join_ids(out: &mut String, ids: &[u32]) {
    for (i, t) in ids.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{t}");
    }
}

/// One record per line:
/// `qid<TAB>q:<ids><TAB>p:<rank>,<label>,<ids>` with one `p:` field per
/// passage. Token ids are space-separated decimal.
pub fn format_dataset(dataset: &[QuestionInstance]) -> String {
    let mut out = String::new();
    for q in dataset {
        out.push_str(&q.id);
        out.push_str("\tq:");
        join_ids(&mut out, &q.question);
        for p in &q.passages {
            let _ = write!(out, "\tp:{},{},", p.rank, u8::from(p.has_answer));
            join_ids(&mut out, &p.tokens);
        }
        out.push('\n');
    }
    out
}

pub fn write_dataset(dataset: &[QuestionInstance], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| ApeError::io(dir, e))?;
        }
    }
    fs::write(path, format_dataset(dataset)).map_err(|e| ApeError::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| ApeError::io(path, e))?;
    parse_dataset(&text)
}

pub fn parse_dataset(text: &str) -> Result<Dataset> {
    let mut out = Vec::new();
    let mut offset = 0;
    for (i, raw) in text.split_inclusive('\n').enumerate() {
        let line_no = i + 1;
        let line = raw.strip_suffix('\n').unwrap_or(raw);
        let line = line.strip_suffix('\r').unwrap_or(line);
        if !line.is_empty() {
            out.push(parse_record(line, line_no, offset)?);
        }
        offset += raw.len();
    }
    Ok(out)
}

fn parse_record(line: &str, line_no: usize, line_offset: usize) -> Result<QuestionInstance> {
    let err = |field_offset: usize, message: String| ApeError::Parse {
        line: line_no,
        offset: line_offset + field_offset,
        message,
    };
    let mut fields = Vec::new();
    let mut start = 0;
    for part in line.split('\t') {
        fields.push((start, part));
        start += part.len() + 1;
    }
    if fields.len() < 3 {
        return Err(err(
            line.len(),
            format!("expected id, question and at least one passage, found {} fields", fields.len()),
        ));
    }
    let id = fields[0].1.to_string();
    if id.is_empty() {
        return Err(err(0, "empty question id".into()));
    }
    let (q_off, q_field) = fields[1];
    let q_ids = q_field
        .strip_prefix("q:")
        .ok_or_else(|| err(q_off, "question field must start with 'q:'".into()))?;
    let question = parse_ids(q_ids).map_err(|(o, m)| err(q_off + 2 + o, m))?;

    let mut passages = Vec::new();
    for &(p_off, p_field) in &fields[2..] {
        let body = p_field
            .strip_prefix("p:")
            .ok_or_else(|| err(p_off, "passage field must start with 'p:'".into()))?;
        let mut parts = body.splitn(3, ',');
        let rank_s = parts.next().unwrap_or("");
        let label_s = parts
            .next()
            .ok_or_else(|| err(p_off + 2, "passage field needs rank,label,tokens".into()))?;
        let ids_s = parts
            .next()
            .ok_or_else(|| err(p_off + 2, "passage field needs rank,label,tokens".into()))?;
        let rank: usize = rank_s
            .parse()
            .map_err(|_| err(p_off + 2, format!("invalid rank '{rank_s}'")))?;
        let label_off = p_off + 2 + rank_s.len() + 1;
        let has_answer = match label_s {
            "0" => false,
            "1" => true,
            other => return Err(err(label_off, format!("label must be 0 or 1, got '{other}'"))),
        };
        let ids_off = label_off + label_s.len() + 1;
        let tokens = parse_ids(ids_s).map_err(|(o, m)| err(ids_off + o, m))?;
        if rank != passages.len() {
            return Err(err(
                p_off + 2,
                format!("expected rank {}, found {rank}", passages.len()),
            ));
        }
        passages.push(Passage {
            rank,
            tokens,
            has_answer,
        });
    }
    let q = QuestionInstance {
        id,
        question,
        passages,
    };
    q.validate().map_err(|e| err(0, e.to_string()))?;
    Ok(q)
}

fn parse_ids(s: &str) -> std::result::Result<Vec<u32>, (usize, String)> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    let mut off = 0;
    for tok in s.split(' ') {
        let v = tok
            .parse::<u32>()
            .map_err(|_| (off, format!("invalid token id '{tok}'")))?;
        out.push(v);
        off += tok.len() + 1;
    }
    Ok(out)
}
