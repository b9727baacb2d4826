use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{OmrError, Result};

/// Answer-box class. Numeric codes follow the dataset's `answerType` column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum AnswerClass {
    Confirmed = 1,
    CrossedOut = 2,
    Empty = 3,
}

impl AnswerClass {
    pub const ALL: [AnswerClass; 3] = [
        AnswerClass::Confirmed,
        AnswerClass::CrossedOut,
        AnswerClass::Empty,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(AnswerClass::Confirmed),
            2 => Ok(AnswerClass::CrossedOut),
            3 => Ok(AnswerClass::Empty),
            other => Err(OmrError::validation(
                "answer-type",
                format!("answerType {other} is not one of 1, 2, 3"),
            )),
        }
    }

    pub fn index(self) -> usize {
        self as usize - 1
    }

    pub fn name(self) -> &'static str {
        match self {
            AnswerClass::Confirmed => "confirmed",
            AnswerClass::CrossedOut => "crossed-out",
            AnswerClass::Empty => "empty",
        }
    }
}

impl TryFrom<u8> for AnswerClass {
    type Error = OmrError;
    fn try_from(v: u8) -> Result<Self> {
        Self::from_code(v)
    }
}

impl From<AnswerClass> for u8 {
    fn from(c: AnswerClass) -> u8 {
        c.code()
    }
}

impl fmt::Display for AnswerClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A non-empty subset of the answer classes, kept in code order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<AnswerClass>", into = "Vec<AnswerClass>")]
pub struct ClassSet(u8);

impl ClassSet {
    /// (a) confirmed, crossed out and empty.
    pub const ALL: ClassSet = ClassSet(0b111);
    /// (b) confirmed and empty.
    pub const CONFIRMED_EMPTY: ClassSet = ClassSet(0b101);
    /// (c) confirmed and crossed out.
    pub const CONFIRMED_CROSSED: ClassSet = ClassSet(0b011);
    /// (d) crossed out and empty.
    pub const CROSSED_EMPTY: ClassSet = ClassSet(0b110);

    pub const SUBSETS: [(char, ClassSet); 4] = [
        ('a', ClassSet::ALL),
        ('b', ClassSet::CONFIRMED_EMPTY),
        ('c', ClassSet::CONFIRMED_CROSSED),
        ('d', ClassSet::CROSSED_EMPTY),
    ];

    pub fn new(classes: &[AnswerClass]) -> Result<Self> {
        let bits = classes.iter().fold(0u8, |b, c| b | (1 << c.index()));
        if bits.count_ones() < 2 {
            return Err(OmrError::ConfigInvalid(
                "a class set needs at least two classes".into(),
            ));
        }
        Ok(ClassSet(bits))
    }

    pub fn from_letter(letter: char) -> Result<Self> {
        Self::SUBSETS
            .iter()
            .find(|(l, _)| *l == letter.to_ascii_lowercase())
            .map(|(_, s)| *s)
            .ok_or_else(|| OmrError::ConfigInvalid(format!("unknown class subset `{letter}`")))
    }

    pub fn letter(self) -> Option<char> {
        Self::SUBSETS.iter().find(|(_, s)| *s == self).map(|(l, _)| *l)
    }

    pub fn contains(self, c: AnswerClass) -> bool {
        self.0 & (1 << c.index()) != 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = AnswerClass> {
        AnswerClass::ALL.into_iter().filter(move |c| self.contains(*c))
    }

    pub fn to_vec(self) -> Vec<AnswerClass> {
        self.iter().collect()
    }

    /// Position of `c` within the set, if present.
    pub fn position(self, c: AnswerClass) -> Option<usize> {
        self.iter().position(|x| x == c)
    }
}

impl TryFrom<Vec<AnswerClass>> for ClassSet {
    type Error = OmrError;
    fn try_from(v: Vec<AnswerClass>) -> Result<Self> {
        Self::new(&v)
    }
}

impl From<ClassSet> for Vec<AnswerClass> {
    fn from(s: ClassSet) -> Self {
        s.to_vec()
    }
}

impl fmt::Display for ClassSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<_> = self.iter().map(|c| c.name()).collect();
        write!(f, "{{{}}}", names.join(", "))
    }
}

/// Uniform classifier output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    /// One score per class of the producing model, in class-code order.
    pub scores: Vec<(AnswerClass, f64)>,
    pub predicted: AnswerClass,
    /// In [0, 1].
    pub confidence: f64,
}

impl ClassScores {
    /// Scores are posteriors: predicted is the argmax, confidence its value.
    pub fn from_probabilities(classes: ClassSet, probs: &[f64]) -> Self {
        let scores: Vec<_> = classes.iter().zip(probs.iter().copied()).collect();
        let (predicted, p) = argmax(&scores);
        ClassScores {
            scores,
            predicted,
            confidence: p.clamp(0.0, 1.0),
        }
    }

    /// Scores are margins: confidence grows with the gap between the best and
    /// runner-up score and saturates at a gap of 2 (one margin on each side).
    pub fn from_margins(classes: ClassSet, margins: &[f64]) -> Self {
        let scores: Vec<_> = classes.iter().zip(margins.iter().copied()).collect();
        let (predicted, best) = argmax(&scores);
        let runner_up = scores
            .iter()
            .filter(|(c, _)| *c != predicted)
            .map(|(_, s)| *s)
            .fold(f64::NEG_INFINITY, f64::max);
        let confidence = ((best - runner_up) / 2.0).clamp(0.0, 1.0);
        ClassScores {
            scores,
            predicted,
            confidence,
        }
    }

    pub fn score(&self, c: AnswerClass) -> Option<f64> {
        self.scores.iter().find(|(k, _)| *k == c).map(|(_, s)| *s)
    }
}

/// First maximum wins on ties.
fn argmax(scores: &[(AnswerClass, f64)]) -> (AnswerClass, f64) {
    let mut best = scores[0];
    for &(c, s) in &scores[1..] {
        if s > best.1 {
            best = (c, s);
        }
    }
    best
}
