//! Seeded generation of the label-query datasets.
//!
//! A sequence is a 58-token background prefix followed by the six-token
//! relevance suffix `[marker, u1, marker, u2, query, answer]`.
//!
//! The background tiles a nested template
//! `OPEN a1..a4 [inner unit] MID c1..c4 CLOSE` until 58 positions are filled.
//! Nesting depth is drawn uniformly from `1..=d` once per sequence. Each chunk
//! slot is a *filler* slot: with probability `b` it copies a fixed motif token
//! keyed to its (level, side, slot) position in the template, otherwise it is
//! uniform over the content vocabulary. With probability `p` a right-side
//! chunk mirrors its left-side chunk instead of being filled fresh.

use crate::error::{Error, Result};
use crate::rng::{StreamKey, StreamRng};
use crate::vocab::{self, TokenId, Vocabulary, VOCAB_SIZE};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

pub const SEQ_LEN: usize = 64;
pub const PREFIX_LEN: usize = 58;
pub const SUFFIX_LEN: usize = SEQ_LEN - PREFIX_LEN;
pub const CHUNK_LEN: usize = 4;
/// Position of the query token; the last position of the answer-free prefix.
pub const QUERY_POS: usize = SEQ_LEN - 2;
pub const ANSWER_POS: usize = SEQ_LEN - 1;

const ABSENT_BUCKET: u8 = 255;
const RECORD_LEN: usize = SEQ_LEN + 4;
const SPLIT_MAGIC: &[u8; 8] = b"PGSPLIT1";

/// The five generator coordinates `(b, rho, eta, p, d)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub b: f64,
    pub rho: f64,
    pub eta: f64,
    pub p: f64,
    pub d: u32,
}

impl Theta {
    pub const fn new(b: f64, rho: f64, eta: f64, p: f64, d: u32) -> Self {
        Theta { b, rho, eta, p, d }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub n_ood: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub b: f64,
    pub rho: f64,
    pub eta: f64,
    pub p: f64,
    pub d: u32,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub n_ood: usize,
    pub seed: u64,
}

impl DatasetConfig {
    pub fn new(theta: Theta, sizes: SplitSizes, seed: u64) -> Self {
        DatasetConfig {
            b: theta.b,
            rho: theta.rho,
            eta: theta.eta,
            p: theta.p,
            d: theta.d,
            n_train: sizes.n_train,
            n_val: sizes.n_val,
            n_test: sizes.n_test,
            n_ood: sizes.n_ood,
            seed,
        }
    }

    pub fn theta(&self) -> Theta {
        Theta::new(self.b, self.rho, self.eta, self.p, self.d)
    }

    pub fn sizes(&self) -> SplitSizes {
        SplitSizes {
            n_train: self.n_train,
            n_val: self.n_val,
            n_test: self.n_test,
            n_ood: self.n_ood,
        }
    }

    pub fn validate(&self) -> Result<()> {
        validate_theta(&self.theta())?;
        for (name, n) in [
            ("n_train", self.n_train),
            ("n_val", self.n_val),
            ("n_test", self.n_test),
            ("n_ood", self.n_ood),
        ] {
            if n == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    /// Parses the key/value config file format (TOML).
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: DatasetConfig = toml::from_str(text).map_err(|e| Error::Malformed {
            what: "dataset config",
            detail: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }
}

pub fn validate_theta(theta: &Theta) -> Result<()> {
    for (name, v) in [("b", theta.b), ("rho", theta.rho), ("eta", theta.eta), ("p", theta.p)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Config(format!("{name} = {v} is not a probability")));
        }
    }
    if theta.d < 1 {
        return Err(Error::Config("max nesting depth d must be at least 1".into()));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledExample {
    pub tokens: [TokenId; SEQ_LEN],
    pub label: u8,
    pub informative: bool,
    pub bucket_u1: Option<u8>,
    pub bucket_u2: Option<u8>,
}

impl LabeledExample {
    pub fn suffix(&self) -> &[TokenId] {
        &self.tokens[PREFIX_LEN..]
    }

    pub fn u1(&self) -> TokenId {
        self.tokens[PREFIX_LEN + 1]
    }

    pub fn u2(&self) -> TokenId {
        self.tokens[PREFIX_LEN + 3]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitSet {
    pub config: DatasetConfig,
    pub train: Vec<LabeledExample>,
    pub val: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
    pub ood: Vec<LabeledExample>,
    /// Bijection over token ids applied to OOD backgrounds; identity outside
    /// the scaffold and content vocabularies.
    pub ood_permutation: Vec<TokenId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Ood,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::Test, Split::Ood];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Ood => "ood",
        }
    }
}

impl SplitSet {
    pub fn split(&self, split: Split) -> &[LabeledExample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
            Split::Ood => &self.ood,
        }
    }
}

// ---------------------------------------------------------------------------
// Background

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlotKind {
    Scaffold,
    /// Filler slot that copied the template motif.
    Motif,
    /// Filler slot drawn uniformly from the content vocabulary.
    Uniform,
    /// Right-side slot copied from the mirrored left-side chunk.
    Mirror,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Background {
    pub tokens: Vec<TokenId>,
    pub kinds: Vec<SlotKind>,
    pub depth: u32,
}

/// Motif token for a filler slot at `(level, side, slot)` of the template.
pub fn motif_token(level: usize, side: usize, slot: usize) -> TokenId {
    let content = VOCAB_SIZE - vocab::CONTENT_START as usize;
    let key = level * 2 * CHUNK_LEN + side * CHUNK_LEN + slot;
    vocab::CONTENT_START + ((11 * key + 5) % content) as TokenId
}

struct BackgroundWriter<'a, R: Rng> {
    rng: &'a mut R,
    b: f64,
    p: f64,
    out: Background,
}

impl<R: Rng> BackgroundWriter<'_, R> {
    fn push(&mut self, token: TokenId, kind: SlotKind) {
        self.out.tokens.push(token);
        self.out.kinds.push(kind);
    }

    fn filler(&mut self, level: usize, side: usize, slot: usize) -> (TokenId, SlotKind) {
        fill_slot(self.rng, self.b, level, side, slot)
    }

    fn unit(&mut self, level: usize, remaining: u32) {
        self.push(vocab::OPEN, SlotKind::Scaffold);
        let mut left = [0; CHUNK_LEN];
        for (j, slot) in left.iter_mut().enumerate() {
            let (t, k) = self.filler(level, 0, j);
            *slot = t;
            self.push(t, k);
        }
        if remaining > 1 {
            self.unit(level + 1, remaining - 1);
        }
        self.push(vocab::MID, SlotKind::Scaffold);
        if self.rng.random_bool(self.p) {
            for t in left {
                self.push(t, SlotKind::Mirror);
            }
        } else {
            for j in 0..CHUNK_LEN {
                let (t, k) = self.filler(level, 1, j);
                self.push(t, k);
            }
        }
        self.push(vocab::CLOSE, SlotKind::Scaffold);
    }
}

fn fill_slot<R: Rng>(rng: &mut R, b: f64, level: usize, side: usize, slot: usize) -> (TokenId, SlotKind) {
    if rng.random_bool(b) {
        (motif_token(level, side, slot), SlotKind::Motif)
    } else {
        (uniform_content(rng), SlotKind::Uniform)
    }
}

fn uniform_content<R: Rng>(rng: &mut R) -> TokenId {
    rng.random_range(vocab::CONTENT_START..VOCAB_SIZE as TokenId)
}

/// Generates a background prefix together with the role of every slot.
pub fn gen_background_traced<R: Rng>(rng: &mut R, b: f64, p: f64, d: u32, length: usize) -> Result<Background> {
    validate_theta(&Theta::new(b, 0.0, 0.0, p, d))?;
    if length != PREFIX_LEN {
        return Err(Error::Config(format!("background length must be {PREFIX_LEN}, got {length}")));
    }
    let depth = rng.random_range(1..=d);
    let mut w = BackgroundWriter {
        rng,
        b,
        p,
        out: Background {
            tokens: Vec::with_capacity(length + 11 * depth as usize),
            kinds: Vec::with_capacity(length + 11 * depth as usize),
            depth,
        },
    };
    while w.out.tokens.len() < length {
        w.unit(0, depth);
    }
    let mut out = w.out;
    out.tokens.truncate(length);
    out.kinds.truncate(length);
    Ok(out)
}

pub fn gen_background<R: Rng>(rng: &mut R, b: f64, p: f64, d: u32, length: usize) -> Result<Vec<TokenId>> {
    gen_background_traced(rng, b, p, d, length).map(|bg| bg.tokens)
}

// ---------------------------------------------------------------------------
// Relevance suffix

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Suffix {
    pub tokens: [TokenId; SUFFIX_LEN],
    pub label: u8,
    pub informative: bool,
    pub bucket_u1: Option<u8>,
    pub bucket_u2: Option<u8>,
}

/// Draws the six-token suffix.
///
/// Informative examples encode the *intended* same/different relation in the
/// answer; with probability `eta` the bucket used to draw `u2` is flipped, so
/// the observed relation disagrees with the label at rate `eta`.
pub fn gen_relevance_suffix<R: Rng>(rng: &mut R, rho: f64, eta: f64, vocab: &Vocabulary) -> Suffix {
    let informative = rng.random_bool(rho);
    let (u1, u2, label) = if informative {
        let relevance = vocab.relevance();
        let u1 = relevance[rng.random_range(0..relevance.len())];
        let same = rng.random_bool(0.5);
        let b1 = vocab::bucket_of(u1).expect("relevance token");
        let intended = if same { b1 } else { 1 - b1 };
        let generating = if rng.random_bool(eta) { 1 - intended } else { intended };
        let bucket = if generating == 0 { &vocab.bucket0 } else { &vocab.bucket1 };
        let u2 = bucket[rng.random_range(0..bucket.len())];
        (u1, u2, same as u8)
    } else {
        let pool = vocab.distractor_tokens();
        let u1 = pool[rng.random_range(0..pool.len())];
        let u2 = pool[rng.random_range(0..pool.len())];
        (u1, u2, rng.random_bool(0.5) as u8)
    };
    Suffix {
        tokens: [vocab.marker, u1, vocab.marker, u2, vocab.query, vocab.answer_for(label)],
        label,
        informative,
        bucket_u1: vocab::bucket_of(u1),
        bucket_u2: vocab::bucket_of(u2),
    }
}

pub fn gen_example<R: Rng>(rng: &mut R, theta: &Theta, vocab: &Vocabulary) -> Result<LabeledExample> {
    let background = gen_background(rng, theta.b, theta.p, theta.d, PREFIX_LEN)?;
    let suffix = gen_relevance_suffix(rng, theta.rho, theta.eta, vocab);
    let mut tokens = [0; SEQ_LEN];
    tokens[..PREFIX_LEN].copy_from_slice(&background);
    tokens[PREFIX_LEN..].copy_from_slice(&suffix.tokens);
    Ok(LabeledExample {
        tokens,
        label: suffix.label,
        informative: suffix.informative,
        bucket_u1: suffix.bucket_u1,
        bucket_u2: suffix.bucket_u2,
    })
}

// ---------------------------------------------------------------------------
// OOD shift

#[derive(Clone, Debug, PartialEq)]
struct RepeatRedraw {
    b: f64,
    p: f64,
    key: StreamKey,
}

/// Background-only rewrite used to build the OOD split.
#[derive(Clone, Debug, PartialEq)]
pub struct OodShift {
    permutation: Vec<TokenId>,
    repeats: Option<RepeatRedraw>,
}

#[derive(Debug)]
struct Frame {
    level: usize,
    left: Vec<usize>,
    right: Vec<usize>,
    in_right: bool,
}

/// Recovers the nested chunk layout of a background prefix from its scaffold tokens.
fn parse_frames(prefix: &[TokenId]) -> Vec<Frame> {
    let mut frames: Vec<Frame> = Vec::new();
    let mut stack: Vec<usize> = Vec::new();
    for (i, &t) in prefix.iter().enumerate() {
        match t {
            vocab::OPEN => {
                frames.push(Frame {
                    level: stack.len(),
                    left: Vec::new(),
                    right: Vec::new(),
                    in_right: false,
                });
                stack.push(frames.len() - 1);
            }
            vocab::MID => {
                if let Some(&top) = stack.last() {
                    frames[top].in_right = true;
                }
            }
            vocab::CLOSE => {
                stack.pop();
            }
            _ => {
                if let Some(&top) = stack.last() {
                    let f = &mut frames[top];
                    if f.in_right {
                        f.right.push(i);
                    } else {
                        f.left.push(i);
                    }
                }
            }
        }
    }
    frames
}

impl OodShift {
    pub fn identity() -> Self {
        OodShift {
            permutation: (0..VOCAB_SIZE as TokenId).collect(),
            repeats: None,
        }
    }

    /// Random bijection over scaffold and content ids, plus mirror decisions
    /// re-drawn per example from `key.child("repeats").child(index)`.
    pub fn seeded(key: &StreamKey, b: f64, p: f64) -> Self {
        let vocab = Vocabulary::build();
        let source = vocab.background_tokens();
        let mut target = source.clone();
        target.shuffle(&mut key.child("permutation").rng());
        let mut permutation: Vec<TokenId> = (0..VOCAB_SIZE as TokenId).collect();
        for (s, t) in source.iter().zip(&target) {
            permutation[*s as usize] = *t;
        }
        OodShift {
            permutation,
            repeats: Some(RepeatRedraw {
                b,
                p,
                key: key.child("repeats"),
            }),
        }
    }

    pub fn from_permutation(permutation: Vec<TokenId>) -> Result<Self> {
        check_background_bijection(&permutation)?;
        Ok(OodShift {
            permutation,
            repeats: None,
        })
    }

    pub fn permutation(&self) -> &[TokenId] {
        &self.permutation
    }

    pub fn apply(&self, index: usize, example: &LabeledExample) -> LabeledExample {
        let mut out = example.clone();
        if let Some(redraw) = &self.repeats {
            let mut rng: StreamRng = redraw.key.child(index).rng();
            let prefix = &mut out.tokens[..PREFIX_LEN];
            for frame in parse_frames(prefix) {
                if frame.right.is_empty() {
                    continue;
                }
                if rng.random_bool(redraw.p) {
                    for (j, &pos) in frame.right.iter().enumerate() {
                        prefix[pos] = prefix[frame.left[j]];
                    }
                } else {
                    for (j, &pos) in frame.right.iter().enumerate() {
                        prefix[pos] = fill_slot(&mut rng, redraw.b, frame.level, 1, j).0;
                    }
                }
            }
        }
        for t in &mut out.tokens[..PREFIX_LEN] {
            *t = self.permutation[*t as usize];
        }
        out
    }
}

fn check_background_bijection(permutation: &[TokenId]) -> Result<()> {
    let bad = |detail: String| Error::Malformed {
        what: "ood permutation",
        detail,
    };
    if permutation.len() != VOCAB_SIZE {
        return Err(bad(format!("expected {VOCAB_SIZE} entries, got {}", permutation.len())));
    }
    let mut seen = [false; VOCAB_SIZE];
    for (i, &t) in permutation.iter().enumerate() {
        let i = i as TokenId;
        let background = |x: TokenId| vocab::is_scaffold(x) || vocab::is_content(x);
        if (t as usize) >= VOCAB_SIZE || seen[t as usize] {
            return Err(bad(format!("entry {i} -> {t} is not a bijection")));
        }
        if background(i) != background(t) || (!background(i) && i != t) {
            return Err(bad(format!("entry {i} -> {t} leaves the background vocabulary")));
        }
        seen[t as usize] = true;
    }
    Ok(())
}

pub fn apply_ood_shift(examples: &[LabeledExample], shift: &OodShift) -> Vec<LabeledExample> {
    examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| shift.apply(i, ex))
        .collect()
}

// ---------------------------------------------------------------------------
// Dataset

fn gen_split(key: &StreamKey, n: usize, theta: &Theta, vocab: &Vocabulary) -> Result<Vec<LabeledExample>> {
    (0..n)
        .into_par_iter()
        .map(|i| gen_example(&mut key.child(i).rng(), theta, vocab))
        .collect()
}

pub fn gen_dataset(config: &DatasetConfig) -> Result<SplitSet> {
    config.validate()?;
    let vocab = Vocabulary::build();
    let theta = config.theta();
    let root = StreamKey::root(config.seed).child("data");
    let train = gen_split(&root.child("train"), config.n_train, &theta, &vocab)?;
    let val = gen_split(&root.child("val"), config.n_val, &theta, &vocab)?;
    let test = gen_split(&root.child("test"), config.n_test, &theta, &vocab)?;
    let ood_source = gen_split(&root.child("ood"), config.n_ood, &theta, &vocab)?;
    let shift = OodShift::seeded(&root.child("ood-shift"), theta.b, theta.p);
    let ood = apply_ood_shift(&ood_source, &shift);
    Ok(SplitSet {
        config: config.clone(),
        train,
        val,
        test,
        ood,
        ood_permutation: shift.permutation.clone(),
    })
}

// ---------------------------------------------------------------------------
// Binary split files
//
// Layout: 8-byte magic `PGSPLIT1`, u32 little-endian header length, header
// JSON, then fixed 68-byte records: 64 token bytes, label, informative flag,
// bucket of u1, bucket of u2 (255 = absent).

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitHeader {
    pub split: Split,
    pub count: usize,
    pub config: DatasetConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ood_permutation: Option<Vec<TokenId>>,
}

pub fn encode_split(header: &SplitHeader, examples: &[LabeledExample]) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("header serializes");
    let mut buf = Vec::with_capacity(12 + json.len() + examples.len() * RECORD_LEN);
    buf.extend_from_slice(SPLIT_MAGIC);
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for ex in examples {
        buf.extend_from_slice(&ex.tokens);
        buf.push(ex.label);
        buf.push(ex.informative as u8);
        buf.push(ex.bucket_u1.unwrap_or(ABSENT_BUCKET));
        buf.push(ex.bucket_u2.unwrap_or(ABSENT_BUCKET));
    }
    buf
}

pub fn decode_split(bytes: &[u8]) -> Result<(SplitHeader, Vec<LabeledExample>)> {
    let bad = |detail: &str| Error::Malformed {
        what: "split file",
        detail: detail.to_string(),
    };
    if bytes.len() < 12 || &bytes[..8] != SPLIT_MAGIC {
        return Err(bad("missing magic"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body_start = 12 + hlen;
    if bytes.len() < body_start {
        return Err(bad("truncated header"));
    }
    let header: SplitHeader = serde_json::from_slice(&bytes[12..body_start])?;
    let body = &bytes[body_start..];
    if body.len() != header.count * RECORD_LEN {
        return Err(bad("record count does not match header"));
    }
    let bucket = |b: u8| -> Result<Option<u8>> {
        match b {
            ABSENT_BUCKET => Ok(None),
            0 | 1 => Ok(Some(b)),
            _ => Err(bad("bucket byte out of range")),
        }
    };
    let mut examples = Vec::with_capacity(header.count);
    for rec in body.chunks_exact(RECORD_LEN) {
        let mut tokens = [0; SEQ_LEN];
        tokens.copy_from_slice(&rec[..SEQ_LEN]);
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= VOCAB_SIZE) {
            return Err(Error::TokenOutOfRange {
                id: t as usize,
                vocab: VOCAB_SIZE,
            });
        }
        examples.push(LabeledExample {
            tokens,
            label: rec[SEQ_LEN],
            informative: rec[SEQ_LEN + 1] != 0,
            bucket_u1: bucket(rec[SEQ_LEN + 2])?,
            bucket_u2: bucket(rec[SEQ_LEN + 3])?,
        });
    }
    Ok((header, examples))
}

pub fn split_file_name(split: Split) -> String {
    format!("{}.bin", split.name())
}

pub fn save_splits(dir: &Path, set: &SplitSet) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for split in Split::ALL {
        let header = SplitHeader {
            split,
            count: set.split(split).len(),
            config: set.config.clone(),
            ood_permutation: (split == Split::Ood).then(|| set.ood_permutation.clone()),
        };
        let path = dir.join(split_file_name(split));
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(&encode_split(&header, set.split(split)))
            .map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn load_splits(dir: &Path) -> Result<SplitSet> {
    let mut parts = Vec::new();
    let mut permutation = None;
    let mut config = None;
    for split in Split::ALL {
        let path = dir.join(split_file_name(split));
        let mut bytes = Vec::new();
        fs::File::open(&path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(&path, e))?;
        let (header, examples) = decode_split(&bytes)?;
        if header.split != split {
            return Err(Error::Malformed {
                what: "split file",
                detail: format!("{} holds split {:?}", path.display(), header.split),
            });
        }
        if split == Split::Ood {
            permutation = header.ood_permutation.clone();
        }
        config = Some(header.config);
        parts.push(examples);
    }
    let permutation = permutation.ok_or_else(|| Error::Malformed {
        what: "split file",
        detail: "ood header lacks its permutation".into(),
    })?;
    check_background_bijection(&permutation)?;
    let mut parts = parts.into_iter();
    Ok(SplitSet {
        config: config.expect("four splits read"),
        train: parts.next().unwrap_or_default(),
        val: parts.next().unwrap_or_default(),
        test: parts.next().unwrap_or_default(),
        ood: parts.next().unwrap_or_default(),
        ood_permutation: permutation,
    })
}
