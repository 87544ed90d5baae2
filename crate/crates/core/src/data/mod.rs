//! Task data: SCAN generation and interpretation, split construction,
//! file ingestion, vocabularies, and monolingual-corpus settings.

pub mod io;
pub mod mono;
pub mod scan;
pub mod splits;
pub mod vocab;

pub use io::{load_pairs, save_pairs, PairFormat};
pub use mono::{build_mono_setting, MonoCorpus, MonoSetting};
pub use scan::{scan_generate_all, scan_interpret};
pub use splits::{build_split, ScanSplit};
pub use vocab::Vocab;

pub type Token = String;

/// One aligned source/target example.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Pair {
    pub source: Vec<Token>,
    pub target: Vec<Token>,
}

impl Pair {
    pub fn new(source: &str, target: &str) -> Self {
        Self {
            source: tokenize(source),
            target: tokenize(target),
        }
    }

    pub fn from_tokens(source: Vec<Token>, target: Vec<Token>) -> Self {
        Self { source, target }
    }

    /// Pair with source and target swapped; the view a target-to-source
    /// model trains on.
    pub fn flipped(&self) -> Pair {
        Pair {
            source: self.target.clone(),
            target: self.source.clone(),
        }
    }
}

pub fn tokenize(s: &str) -> Vec<Token> {
    s.split_whitespace().map(|t| t.to_string()).collect()
}

pub fn detokenize(tokens: &[Token]) -> String {
    tokens.join(" ")
}

/// A named task: parallel train data plus dev/test corpora.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub train: Vec<Pair>,
    pub dev: Vec<Pair>,
    pub test: Vec<Pair>,
}

impl Dataset {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.dev.len(), self.test.len())
    }
}
