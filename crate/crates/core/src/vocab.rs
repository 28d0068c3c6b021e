//! The fixed 80-token vocabulary.
//!
//! | ids     | role                                  |
//! |---------|---------------------------------------|
//! | 0..=2   | scaffold `OPEN`, `MID`, `CLOSE`       |
//! | 3       | `marker`                              |
//! | 4       | `query`                               |
//! | 5, 6    | `label0`, `label1`                    |
//! | 7..=14  | relevance bucket 0                    |
//! | 15..=22 | relevance bucket 1                    |
//! | 23..=79 | content (background filler, distractors) |

pub type TokenId = u8;

pub const VOCAB_SIZE: usize = 80;
pub const OPEN: TokenId = 0;
pub const MID: TokenId = 1;
pub const CLOSE: TokenId = 2;
pub const MARKER: TokenId = 3;
pub const QUERY: TokenId = 4;
pub const LABEL0: TokenId = 5;
pub const LABEL1: TokenId = 6;
pub const RELEVANCE_START: TokenId = 7;
pub const BUCKET_SIZE: usize = 8;
pub const CONTENT_START: TokenId = 23;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    pub total_size: usize,
    pub scaffold: [TokenId; 3],
    pub marker: TokenId,
    pub query: TokenId,
    pub label0: TokenId,
    pub label1: TokenId,
    pub bucket0: Vec<TokenId>,
    pub bucket1: Vec<TokenId>,
    pub content: Vec<TokenId>,
}

impl Vocabulary {
    pub fn build() -> Self {
        let r = RELEVANCE_START;
        let b = BUCKET_SIZE as TokenId;
        Vocabulary {
            total_size: VOCAB_SIZE,
            scaffold: [OPEN, MID, CLOSE],
            marker: MARKER,
            query: QUERY,
            label0: LABEL0,
            label1: LABEL1,
            bucket0: (r..r + b).collect(),
            bucket1: (r + b..r + 2 * b).collect(),
            content: (CONTENT_START..VOCAB_SIZE as TokenId).collect(),
        }
    }

    /// All 16 relevance tokens, bucket 0 first.
    pub fn relevance(&self) -> Vec<TokenId> {
        self.bucket0.iter().chain(&self.bucket1).copied().collect()
    }

    /// Token ids the background prefix may use (and the OOD permutation acts on).
    pub fn background_tokens(&self) -> Vec<TokenId> {
        self.scaffold.iter().chain(&self.content).copied().collect()
    }

    /// Distractor pool for non-informative suffixes: content plus relevance.
    pub fn distractor_tokens(&self) -> Vec<TokenId> {
        self.relevance().into_iter().chain(self.content.iter().copied()).collect()
    }

    pub fn answer_for(&self, label: u8) -> TokenId {
        if label == 1 {
            self.label1
        } else {
            self.label0
        }
    }
}

pub fn bucket_of(token: TokenId) -> Option<u8> {
    let r = RELEVANCE_START as usize;
    let t = token as usize;
    if (r..r + BUCKET_SIZE).contains(&t) {
        Some(0)
    } else if (r + BUCKET_SIZE..r + 2 * BUCKET_SIZE).contains(&t) {
        Some(1)
    } else {
        None
    }
}

pub fn is_content(token: TokenId) -> bool {
    (CONTENT_START..VOCAB_SIZE as TokenId).contains(&token)
}

pub fn is_scaffold(token: TokenId) -> bool {
    token <= CLOSE
}
