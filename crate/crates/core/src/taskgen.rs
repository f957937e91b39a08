//! Task definitions, operand sampling, token encoding and train/eval set assembly.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng as _;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::digitcore::{self, DigitError, DigitString};
use crate::rng::{stream_rng, Rng, Stream};

pub type TokenId = u8;

pub const S_VOCAB: usize = 15;
pub const PLUS: TokenId = 10;
pub const PERCENT: TokenId = 11;
pub const TIMES: TokenId = 12;
pub const STAR: TokenId = 13;
pub const PAD: TokenId = 14;

/// The fixed 15-symbol vocabulary; a token's id is its index here.
pub struct Vocab;

impl Vocab {
    pub const TOKENS: [&'static str; S_VOCAB] =
        ["0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "+", "%", "×", "*", "<PAD>"];

    pub fn symbol(id: TokenId) -> &'static str {
        Self::TOKENS[id as usize]
    }

    pub fn id(symbol: &str) -> Option<TokenId> {
        match symbol {
            "x" => Some(TIMES),
            _ => Self::TOKENS.iter().position(|&t| t == symbol).map(|i| i as TokenId),
        }
    }

    pub fn render(ids: &[TokenId]) -> String {
        ids.iter().map(|&t| Self::symbol(t)).collect::<Vec<_>>().join(" ")
    }

    pub fn parse(text: &str) -> Option<Vec<TokenId>> {
        text.split_whitespace().map(Self::id).collect()
    }
}

#[derive(Debug, Error)]
pub enum TaskError {
    #[error(transparent)]
    Digit(#[from] DigitError),
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("pool of {size} distinct operands does not fit below 10^{n_train}")]
    PoolTooLarge { size: usize, n_train: usize },
    #[error("{which} has {len} digits but its field is {width} wide")]
    OperandTooWide { which: &'static str, len: usize, width: usize },
    #[error("priming length distribution has empty support")]
    EmptySupport,
    #[error("priming rate {epsilon} on {n_train_examples} examples gives less than one example")]
    PrimingTooSmall { epsilon: f64, n_train_examples: usize },
    #[error("invalid train plan: {0}")]
    InvalidPlan(String),
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TaskError + '_ {
    move |source| TaskError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskKind {
    Add,
    ModAdd,
    Mul,
    ModMul,
    ElementwiseAdd,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] =
        [TaskKind::Add, TaskKind::ModAdd, TaskKind::Mul, TaskKind::ModMul, TaskKind::ElementwiseAdd];

    pub fn is_mul_family(self) -> bool {
        matches!(self, TaskKind::Mul | TaskKind::ModMul)
    }

    pub fn is_add_family(self) -> bool {
        !self.is_mul_family()
    }

    pub fn is_modular(self) -> bool {
        matches!(self, TaskKind::ModAdd | TaskKind::ModMul)
    }

    pub fn operator(self) -> TokenId {
        match self {
            TaskKind::Add | TaskKind::ElementwiseAdd => PLUS,
            TaskKind::ModAdd => PERCENT,
            TaskKind::Mul => TIMES,
            TaskKind::ModMul => STAR,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Add => "add",
            TaskKind::ModAdd => "mod_add",
            TaskKind::Mul => "mul",
            TaskKind::ModMul => "mod_mul",
            TaskKind::ElementwiseAdd => "elementwise_add",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = TaskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| TaskError::InvalidTask(format!("unknown task kind {s:?}")))
    }
}

/// Task kind plus the fixed encoding geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Width of the first operand field (longest first operand ever encoded).
    pub n_test: usize,
    /// Width of the second operand field for the multiplication family.
    pub n2_max: usize,
    pub modulus: Option<u64>,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, n_test: usize, n2_max: usize, modulus: Option<u64>) -> Result<Self, TaskError> {
        if n_test == 0 || n2_max == 0 {
            return Err(TaskError::InvalidTask("operand widths must be positive".into()));
        }
        if kind.is_add_family() && n2_max != n_test {
            return Err(TaskError::InvalidTask(format!(
                "{kind}: second operand width must equal n_test ({n_test}), got {n2_max}"
            )));
        }
        match (kind.is_modular(), modulus) {
            (true, None) => return Err(TaskError::InvalidTask(format!("{kind} requires a modulus"))),
            (true, Some(c)) if c <= 1 => return Err(DigitError::InvalidModulus(c).into()),
            (false, Some(_)) => return Err(TaskError::InvalidTask(format!("{kind} takes no modulus"))),
            _ => {}
        }
        Ok(TaskSpec { kind, n_test, n2_max, modulus })
    }

    /// Addition-family task: both operand fields are `n_test` wide.
    pub fn add_family(kind: TaskKind, n_test: usize, modulus: Option<u64>) -> Result<Self, TaskError> {
        Self::new(kind, n_test, n_test, modulus)
    }

    pub fn n_out(&self) -> usize {
        match self.kind {
            TaskKind::Add | TaskKind::ElementwiseAdd => self.n_test + 1,
            TaskKind::Mul => self.n_test + self.n2_max,
            TaskKind::ModAdd | TaskKind::ModMul => DigitString::from_u64(self.modulus.unwrap_or(2) - 1).len(),
        }
    }

    pub fn second_width(&self) -> usize {
        if self.kind.is_mul_family() {
            self.n2_max
        } else {
            self.n_test
        }
    }

    pub fn input_len(&self) -> usize {
        self.n_test + 1 + self.second_width()
    }

    /// Ground-truth label.
    pub fn label(&self, x1: &DigitString, x2: &DigitString) -> DigitString {
        let c = self.modulus.unwrap_or(2);
        match self.kind {
            TaskKind::Add => digitcore::ds_add(x1, x2),
            TaskKind::Mul => digitcore::ds_mul(x1, x2),
            TaskKind::ElementwiseAdd => digitcore::ds_elementwise_add(x1, x2),
            // modulus validated at construction
            TaskKind::ModAdd => digitcore::ds_mod(&digitcore::ds_add(x1, x2), c).expect("modulus > 1"),
            TaskKind::ModMul => digitcore::ds_mod(&digitcore::ds_mul(x1, x2), c).expect("modulus > 1"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Example {
    pub x1: DigitString,
    pub x2: DigitString,
    pub y: DigitString,
}

impl Example {
    pub fn new(task: &TaskSpec, x1: DigitString, x2: DigitString) -> Self {
        let y = task.label(&x1, &x2);
        Example { x1, x2, y }
    }

    pub fn is_consistent(&self, task: &TaskSpec) -> bool {
        task.label(&self.x1, &self.x2) == self.y
    }
}

/// Uniform integer in `[1, 10^digits)`.
pub fn sample_below_pow10(rng: &mut Rng, digits: usize) -> DigitString {
    loop {
        let ds: Vec<u8> = (0..digits).map(|_| rng.random_range(0..10u8)).collect();
        if ds.iter().any(|&d| d != 0) {
            return DigitString::from_digits_lenient(&ds).expect("digits in range");
        }
    }
}

/// Uniform integer with exactly `digits` digits (`[1, 10)` for one digit).
pub fn sample_exact_length(rng: &mut Rng, digits: usize) -> DigitString {
    let mut ds = Vec::with_capacity(digits);
    ds.push(rng.random_range(1..10u8));
    ds.extend((1..digits).map(|_| rng.random_range(0..10u8)));
    DigitString::from_digits(ds).expect("no leading zero")
}

/// The frozen set of first operands used for training.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OperandPool {
    pub values: Vec<DigitString>,
    pub n_train: usize,
    pub seed: u64,
}

impl OperandPool {
    pub fn contains(&self, x: &DigitString) -> bool {
        self.values.contains(x)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// `size` distinct operands drawn uniformly from `[1, 10^n_train)`.
pub fn build_operand_pool(seed: u64, size: usize, n_train: usize) -> Result<OperandPool, TaskError> {
    if n_train == 0 || n_train > 18 {
        return Err(TaskError::InvalidTask(format!("pool digit length must be in 1..=18, got {n_train}")));
    }
    let domain = 10u64.pow(n_train as u32) - 1;
    if size == 0 || size as u64 > domain {
        return Err(TaskError::PoolTooLarge { size, n_train });
    }
    let mut rng = stream_rng(seed, Stream::Pool);
    let values = rand::seq::index::sample(&mut rng, domain as usize, size)
        .into_iter()
        .map(|i| DigitString::from_u64(i as u64 + 1))
        .collect();
    Ok(OperandPool { values, n_train, seed })
}

/// Where a sampled example's first operand comes from.
#[derive(Debug, Clone, Copy)]
pub enum X1Source<'a> {
    /// Training: from the frozen pool; add-family second operands stay below 10^n_train.
    Pool(&'a OperandPool),
    /// Evaluation or priming: exactly `n` digits.
    Length(usize),
}

pub fn sample_example(task: &TaskSpec, source: X1Source<'_>, rng: &mut Rng) -> Example {
    let (x1, add_width) = match source {
        X1Source::Pool(pool) => {
            let i = rng.random_range(0..pool.values.len());
            (pool.values[i].clone(), pool.n_train)
        }
        X1Source::Length(n) => (sample_exact_length(rng, n), n),
    };
    let x2_width = if task.kind.is_mul_family() { task.n2_max } else { add_width };
    let x2 = sample_below_pow10(rng, x2_width);
    let ex = Example::new(task, x1, x2);
    debug_assert!(ex.is_consistent(task));
    ex
}

fn push_field(out: &mut Vec<TokenId>, value: &DigitString, width: usize, which: &'static str) -> Result<(), TaskError> {
    if value.len() > width {
        return Err(TaskError::OperandTooWide { which, len: value.len(), width });
    }
    out.extend_from_slice(value.digits());
    out.extend(std::iter::repeat_n(PAD, width - value.len()));
    Ok(())
}

/// Encodes to (input ids, target ids). Digits are left-aligned and padded on the right.
pub fn encode_example(ex: &Example, task: &TaskSpec) -> Result<(Vec<TokenId>, Vec<TokenId>), TaskError> {
    let mut input = Vec::with_capacity(task.input_len());
    push_field(&mut input, &ex.x1, task.n_test, "x1")?;
    input.push(task.kind.operator());
    push_field(&mut input, &ex.x2, task.second_width(), "x2")?;
    let mut target = Vec::with_capacity(task.n_out());
    push_field(&mut target, &ex.y, task.n_out(), "y")?;
    Ok((input, target))
}

pub fn encode_target(y: &DigitString, task: &TaskSpec) -> Result<Vec<TokenId>, TaskError> {
    let mut target = Vec::with_capacity(task.n_out());
    push_field(&mut target, y, task.n_out(), "y")?;
    Ok(target)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decoded {
    Value(DigitString),
    Malformed,
}

impl Decoded {
    pub fn value(&self) -> Option<&DigitString> {
        match self {
            Decoded::Value(v) => Some(v),
            Decoded::Malformed => None,
        }
    }
}

/// Reads a predicted output: a non-empty digit run followed only by padding.
pub fn decode_output(tokens: &[TokenId], task: &TaskSpec) -> Decoded {
    debug_assert_eq!(tokens.len(), task.n_out());
    let end = tokens.iter().rposition(|&t| t != PAD).map_or(0, |i| i + 1);
    let body = &tokens[..end];
    if body.is_empty() || body.iter().any(|&t| t > 9) {
        return Decoded::Malformed;
    }
    match DigitString::from_digits_lenient(body) {
        Ok(v) => Decoded::Value(v),
        Err(_) => Decoded::Malformed,
    }
}

/// Decodes an encoded input back to its operands.
pub fn decode_input(tokens: &[TokenId], task: &TaskSpec) -> Option<(DigitString, DigitString)> {
    if tokens.len() != task.input_len() || tokens[task.n_test] != task.kind.operator() {
        return None;
    }
    let field = |ts: &[TokenId]| match decode_field(ts) {
        Decoded::Value(v) => Some(v),
        Decoded::Malformed => None,
    };
    Some((field(&tokens[..task.n_test])?, field(&tokens[task.n_test + 1..])?))
}

fn decode_field(tokens: &[TokenId]) -> Decoded {
    let end = tokens.iter().rposition(|&t| t != PAD).map_or(0, |i| i + 1);
    let body = &tokens[..end];
    if body.is_empty() || body.iter().any(|&t| t > 9) {
        return Decoded::Malformed;
    }
    DigitString::from_digits_lenient(body).map_or(Decoded::Malformed, Decoded::Value)
}

/// Distribution of priming lengths, keyed by digit count.
pub type LengthWeights = BTreeMap<usize, f64>;

/// Named shapes for the priming length distribution.
#[derive(Debug, Clone, PartialEq)]
pub enum PrimingShape {
    /// All mass at one length.
    Single(usize),
    /// Equal mass on `n - 1` and `n`.
    Pair(usize),
    Uniform {
        min: usize,
        max: usize,
    },
    /// Uniform over even lengths in `min..=max`.
    EvenOnly {
        min: usize,
        max: usize,
    },
    Histogram(BTreeMap<usize, f64>),
}

impl PrimingShape {
    /// Parses `single:35`, `pair:35`, `uniform:6-35`, `even:6-35` or `file:<path>`.
    pub fn parse(text: &str) -> Result<Self, TaskError> {
        let bad = || TaskError::InvalidPlan(format!("bad priming distribution {text:?}"));
        let (kind, arg) = text.split_once(':').ok_or_else(bad)?;
        let range = |arg: &str| -> Result<(usize, usize), TaskError> {
            let (a, b) = arg.split_once('-').ok_or_else(bad)?;
            Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
        };
        match kind.trim() {
            "single" => Ok(PrimingShape::Single(arg.trim().parse().map_err(|_| bad())?)),
            "pair" => Ok(PrimingShape::Pair(arg.trim().parse().map_err(|_| bad())?)),
            "uniform" => range(arg).map(|(min, max)| PrimingShape::Uniform { min, max }),
            "even" => range(arg).map(|(min, max)| PrimingShape::EvenOnly { min, max }),
            "file" => load_priming_histogram(Path::new(arg.trim())).map(PrimingShape::Histogram),
            _ => Err(bad()),
        }
    }
}

pub fn priming_weights(shape: &PrimingShape) -> Result<LengthWeights, TaskError> {
    let mut w = LengthWeights::new();
    match shape {
        PrimingShape::Single(n) => {
            w.insert(*n, 1.0);
        }
        PrimingShape::Pair(n) => {
            if *n >= 2 {
                w.insert(n - 1, 0.5);
            }
            w.insert(*n, if *n >= 2 { 0.5 } else { 1.0 });
        }
        PrimingShape::Uniform { min, max } => {
            let count = (*min..=*max).count();
            for n in *min..=*max {
                w.insert(n, 1.0 / count as f64);
            }
        }
        PrimingShape::EvenOnly { min, max } => {
            let evens: Vec<usize> = (*min..=*max).filter(|n| n % 2 == 0).collect();
            for &n in &evens {
                w.insert(n, 1.0 / evens.len() as f64);
            }
        }
        PrimingShape::Histogram(h) => {
            let total: f64 = h.values().filter(|v| **v > 0.0).sum();
            for (&n, &v) in h {
                if v > 0.0 {
                    w.insert(n, v / total);
                }
            }
        }
    }
    w.retain(|&n, v| n > 0 && *v > 0.0);
    if w.is_empty() {
        return Err(TaskError::EmptySupport);
    }
    Ok(w)
}

/// Reads a `length count` per line histogram; blank lines and `#` comments are skipped.
pub fn load_priming_histogram(path: &Path) -> Result<BTreeMap<usize, f64>, TaskError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |msg: &str| TaskError::Parse { path: path.to_path_buf(), line: i + 1, msg: msg.into() };
        let mut parts = line.split_whitespace();
        let (Some(n), Some(c), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(parse_err("expected `length count`"));
        };
        let n: usize = n.parse().map_err(|_| parse_err("bad length"))?;
        let c: f64 = c.parse().map_err(|_| parse_err("bad count"))?;
        if !(c.is_finite() && c >= 0.0) {
            return Err(parse_err("count must be non-negative"));
        }
        *out.entry(n).or_insert(0.0) += c;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Procedure {
    Standard,
    FineTune,
    Priming,
}

impl FromStr for Procedure {
    type Err = TaskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "standard" => Ok(Procedure::Standard),
            "fine_tune" => Ok(Procedure::FineTune),
            "priming" => Ok(Procedure::Priming),
            _ => Err(TaskError::InvalidPlan(format!("unknown procedure {s:?}"))),
        }
    }
}

impl fmt::Display for Procedure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Procedure::Standard => "standard",
            Procedure::FineTune => "fine_tune",
            Procedure::Priming => "priming",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrimingPlan {
    pub epsilon: f64,
    pub weights: LengthWeights,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FineTuneTarget {
    pub n_target: usize,
    pub n_fine: usize,
}

/// How a training set is composed.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPlan {
    pub procedure: Procedure,
    pub task: TaskSpec,
    /// Longest training first operand.
    pub n_train: usize,
    /// Examples per epoch.
    pub n_train_examples: usize,
    /// Distinct first operands in the frozen pool.
    pub pool_size: usize,
    pub priming: Option<PrimingPlan>,
    pub fine_tune: Option<FineTuneTarget>,
    pub seed: u64,
}

impl TrainPlan {
    /// Standard plan whose pool holds one operand per epoch example.
    pub fn standard(task: TaskSpec, n_train: usize, n_train_examples: usize, seed: u64) -> Self {
        TrainPlan {
            procedure: Procedure::Standard,
            task,
            n_train,
            n_train_examples,
            pool_size: n_train_examples,
            priming: None,
            fine_tune: None,
            seed,
        }
    }

    pub fn with_priming(mut self, epsilon: f64, weights: LengthWeights) -> Self {
        self.procedure = Procedure::Priming;
        self.priming = Some(PrimingPlan { epsilon, weights });
        self
    }

    pub fn with_fine_tune(mut self, n_target: usize, n_fine: usize) -> Self {
        self.procedure = Procedure::FineTune;
        self.fine_tune = Some(FineTuneTarget { n_target, n_fine });
        self
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        let bad = |m: String| Err(TaskError::InvalidPlan(m));
        if self.n_train == 0 || self.n_train > self.task.n_test {
            return bad(format!("n_train {} must be in 1..=n_test ({})", self.n_train, self.task.n_test));
        }
        if self.n_train_examples == 0 {
            return bad("N_train must be positive".into());
        }
        match (self.procedure, &self.priming, &self.fine_tune) {
            (Procedure::Standard, None, None) => {}
            (Procedure::Priming, Some(p), None) => {
                if !(0.0..1.0).contains(&p.epsilon) {
                    return bad(format!("priming rate {} must be in [0, 1)", p.epsilon));
                }
                if p.epsilon > 0.0 && p.epsilon * (self.n_train_examples as f64) < 1.0 {
                    return Err(TaskError::PrimingTooSmall {
                        epsilon: p.epsilon,
                        n_train_examples: self.n_train_examples,
                    });
                }
                if p.weights.values().all(|w| *w <= 0.0) {
                    return Err(TaskError::EmptySupport);
                }
                if let Some((&n, _)) = p.weights.iter().find(|(&n, _)| n == 0 || n > self.task.n_test) {
                    return bad(format!("priming length {n} outside 1..={}", self.task.n_test));
                }
            }
            (Procedure::FineTune, None, Some(f)) => {
                if f.n_target == 0 || f.n_target > self.task.n_test {
                    return bad(format!("fine-tune length {} outside 1..={}", f.n_target, self.task.n_test));
                }
            }
            (p, _, _) => return bad(format!("{p} plan has mismatched priming/fine-tune blocks")),
        }
        Ok(())
    }

    /// Number of fixed priming examples.
    pub fn priming_count(&self) -> usize {
        match &self.priming {
            Some(p) if p.epsilon > 0.0 => ((p.epsilon * self.n_train_examples as f64).round() as usize).max(1),
            _ => 0,
        }
    }
}

/// Materialized priming set, frozen at plan creation.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimingSpec {
    pub epsilon: f64,
    pub length_weights: LengthWeights,
    pub fixed_examples: Vec<Example>,
}

/// Provenance of a training example within an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Short,
    Priming,
    Fine,
}

#[derive(Debug, Clone)]
pub struct TrainSet {
    pub task: TaskSpec,
    pub pool: OperandPool,
    /// Freshly sampled short examples per epoch.
    pub n_short: usize,
    pub priming: Option<PrimingSpec>,
    /// Fixed fine-tuning set (fine-tune plans only).
    pub fine: Vec<Example>,
    pub seed: u64,
}

impl TrainSet {
    /// One epoch of the main phase: short examples regenerated from the pool plus the
    /// fixed priming examples, interleaved at random.
    pub fn epoch(&self, epoch: u64) -> Vec<(Example, Origin)> {
        let mut rng = stream_rng(self.seed, Stream::Epoch(epoch));
        let mut items: Vec<(Example, Origin)> = (0..self.n_short)
            .map(|_| (sample_example(&self.task, X1Source::Pool(&self.pool), &mut rng), Origin::Short))
            .collect();
        if let Some(p) = &self.priming {
            items.extend(p.fixed_examples.iter().cloned().map(|e| (e, Origin::Priming)));
            items.shuffle(&mut rng);
        }
        items
    }

    /// One epoch of the fine-tuning phase: the fixed set, reshuffled.
    pub fn fine_epoch(&self, epoch: u64) -> Vec<(Example, Origin)> {
        let mut rng = stream_rng(self.seed, Stream::Epoch(epoch | 1 << 63));
        let mut items: Vec<_> = self.fine.iter().cloned().map(|e| (e, Origin::Fine)).collect();
        items.shuffle(&mut rng);
        items
    }

    pub fn epoch_len(&self) -> usize {
        self.n_short + self.priming.as_ref().map_or(0, |p| p.fixed_examples.len())
    }
}

pub fn make_train_set(plan: &TrainPlan) -> Result<TrainSet, TaskError> {
    plan.validate()?;
    let pool = build_operand_pool(plan.seed, plan.pool_size, plan.n_train)?;
    let n_priming = plan.priming_count();
    let priming = match &plan.priming {
        Some(p) if n_priming > 0 => {
            let lengths: Vec<usize> = p.weights.keys().copied().collect();
            let dist = WeightedIndex::new(p.weights.values().copied()).map_err(|_| TaskError::EmptySupport)?;
            let mut rng = stream_rng(plan.seed, Stream::Priming);
            let fixed_examples = (0..n_priming)
                .map(|_| {
                    let n = lengths[dist.sample(&mut rng)];
                    sample_example(&plan.task, X1Source::Length(n), &mut rng)
                })
                .collect();
            Some(PrimingSpec { epsilon: p.epsilon, length_weights: p.weights.clone(), fixed_examples })
        }
        _ => None,
    };
    let fine = match plan.fine_tune {
        Some(f) => {
            let mut rng = stream_rng(plan.seed, Stream::FineTuneSet);
            (0..f.n_fine).map(|_| sample_example(&plan.task, X1Source::Length(f.n_target), &mut rng)).collect()
        }
        None => Vec::new(),
    };
    Ok(TrainSet { task: plan.task, pool, n_short: plan.n_train_examples - n_priming, priming, fine, seed: plan.seed })
}

#[derive(Debug, Clone)]
pub struct EvalSet {
    pub length: usize,
    pub in_distribution: bool,
    pub examples: Vec<Example>,
}

/// Fresh test set of `count` examples whose first operand has exactly `n` digits.
pub fn make_eval_set(task: &TaskSpec, n: usize, count: usize, n_train: usize, rng: &mut Rng) -> EvalSet {
    assert!(n >= 1, "evaluation length must be positive");
    let examples = (0..count).map(|_| sample_example(task, X1Source::Length(n), rng)).collect();
    EvalSet { length: n, in_distribution: n == n_train, examples }
}

/// Order-independent digest of a set of examples.
pub fn multiset_hash(examples: &[Example]) -> String {
    let mut lines: Vec<String> = examples.iter().map(|e| format!("{}\t{}\t{}", e.x1, e.x2, e.y)).collect();
    lines.sort_unstable();
    let mut h = Sha256::new();
    for l in &lines {
        h.update(l.as_bytes());
        h.update(b"\n");
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `x1<TAB>x2<TAB>y` lines.
pub fn write_examples_tsv(path: &Path, examples: &[Example]) -> Result<(), TaskError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for e in examples {
        writeln!(w, "{}\t{}\t{}", e.x1, e.x2, e.y).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_examples_tsv(path: &Path) -> Result<Vec<Example>, TaskError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let parse_err = |msg: String| TaskError::Parse { path: path.to_path_buf(), line: i + 1, msg };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(parse_err(format!("expected 3 fields, got {}", fields.len())));
            }
            let p = |s: &str| s.parse::<DigitString>().map_err(|e| parse_err(e.to_string()));
            Ok(Example { x1: p(fields[0])?, x2: p(fields[1])?, y: p(fields[2])? })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use std::collections::HashSet;

    fn ds(s: &str) -> DigitString {
        s.parse().unwrap()
    }

    fn add3() -> TaskSpec {
        TaskSpec::add_family(TaskKind::Add, 3, None).unwrap()
    }

    #[test]
    fn vocab_layout() {
        assert_eq!(Vocab::TOKENS.len(), 15);
        for d in 0..10u8 {
            assert_eq!(Vocab::id(&d.to_string()), Some(d));
        }
        assert_eq!(Vocab::id("<PAD>"), Some(PAD));
        assert_eq!(TaskKind::Add.operator(), PLUS);
        assert_eq!(TaskKind::ModAdd.operator(), PERCENT);
        assert_eq!(TaskKind::Mul.operator(), TIMES);
        assert_eq!(TaskKind::ModMul.operator(), STAR);
        assert_eq!(TaskKind::ElementwiseAdd.operator(), PLUS);
    }

    #[test]
    fn output_lengths() {
        assert_eq!(add3().n_out(), 4);
        let mul = TaskSpec::new(TaskKind::Mul, 35, 3, None).unwrap();
        assert_eq!(mul.n_out(), 38);
        assert_eq!(mul.input_len(), 39);
        for (c, n) in [(100, 2), (101, 3), (128, 3), (1000, 3)] {
            let t = TaskSpec::add_family(TaskKind::ModAdd, 5, Some(c)).unwrap();
            assert_eq!(t.n_out(), n, "c = {c}");
        }
        assert!(TaskSpec::add_family(TaskKind::ModAdd, 5, None).is_err());
        assert!(TaskSpec::add_family(TaskKind::Add, 5, Some(7)).is_err());
        assert!(TaskSpec::new(TaskKind::Add, 5, 3, None).is_err());
    }

    #[test]
    fn labels_for_worked_examples() {
        let t = add3();
        assert_eq!(Example::new(&t, ds("12"), ds("39")).y, ds("51"));
        let m = TaskSpec::add_family(TaskKind::ModAdd, 3, Some(100)).unwrap();
        assert_eq!(Example::new(&m, ds("999"), ds("345")).y, ds("44"));
        let mul = TaskSpec::new(TaskKind::Mul, 3, 3, None).unwrap();
        assert_eq!(Example::new(&mul, ds("535"), ds("257")).y, ds("137495"));
    }

    #[test]
    fn encodes_worked_examples() {
        let t = add3();
        let (x, y) = encode_example(&Example::new(&t, ds("12"), ds("39")), &t).unwrap();
        assert_eq!(Vocab::render(&x), "1 2 <PAD> + 3 9 <PAD>");
        assert_eq!(Vocab::render(&y), "5 1 <PAD> <PAD>");
        let (x, y) = encode_example(&Example::new(&t, ds("999"), ds("345")), &t).unwrap();
        assert_eq!(Vocab::render(&x), "9 9 9 + 3 4 5");
        assert_eq!(Vocab::render(&y), "1 3 4 4");
    }

    #[test]
    fn rejects_wide_operands() {
        let t = add3();
        let ex = Example::new(&t, ds("1234"), ds("1"));
        assert!(matches!(encode_example(&ex, &t), Err(TaskError::OperandTooWide { which: "x1", .. })));
    }

    #[test]
    fn decode_rules() {
        let t = add3();
        let p = |s: &str| Vocab::parse(s).unwrap();
        assert_eq!(decode_output(&p("5 1 <PAD> <PAD>"), &t), Decoded::Value(ds("51")));
        assert_eq!(decode_output(&p("1 3 4 4"), &t), Decoded::Value(ds("1344")));
        assert_eq!(decode_output(&p("5 <PAD> 1 <PAD>"), &t), Decoded::Malformed);
        assert_eq!(decode_output(&p("<PAD> <PAD> <PAD> <PAD>"), &t), Decoded::Malformed);
        assert_eq!(decode_output(&p("5 + <PAD> <PAD>"), &t), Decoded::Malformed);
    }

    #[test]
    fn pool_properties() {
        let p = build_operand_pool(7, 5000, 5).unwrap();
        assert_eq!(p.len(), 5000);
        let distinct: HashSet<_> = p.values.iter().collect();
        assert_eq!(distinct.len(), 5000);
        assert!(p.values.iter().all(|v| (1..=99_999).contains(&v.to_u64().unwrap())));
        assert_eq!(p, build_operand_pool(7, 5000, 5).unwrap());

        let full = build_operand_pool(3, 9, 1).unwrap();
        let mut vals: Vec<u64> = full.values.iter().map(|v| v.to_u64().unwrap()).collect();
        vals.sort_unstable();
        assert_eq!(vals, (1..=9).collect::<Vec<_>>());

        assert!(matches!(build_operand_pool(1, 10, 1), Err(TaskError::PoolTooLarge { .. })));
        assert!(matches!(build_operand_pool(1, 1000, 3), Err(TaskError::PoolTooLarge { .. })));
    }

    #[test]
    fn sampling_ranges() {
        let mut rng = Rng::seed_from_u64(5);
        let pool = build_operand_pool(1, 50, 3).unwrap();
        let mul = TaskSpec::new(TaskKind::Mul, 6, 2, None).unwrap();
        for _ in 0..500 {
            let e = sample_example(&add3(), X1Source::Pool(&pool), &mut rng);
            assert!(pool.contains(&e.x1));
            assert!(e.x2.len() <= 3 && !e.x2.is_zero());
            let e = sample_example(&mul, X1Source::Length(6), &mut rng);
            assert_eq!(e.x1.len(), 6);
            assert!(e.x2.len() <= 2 && !e.x2.is_zero());
            assert!(e.is_consistent(&mul));
        }
    }

    #[test]
    fn priming_shapes() {
        assert_eq!(priming_weights(&PrimingShape::Single(35)).unwrap(), BTreeMap::from([(35, 1.0)]));
        assert_eq!(priming_weights(&PrimingShape::Pair(35)).unwrap(), BTreeMap::from([(34, 0.5), (35, 0.5)]));
        let even = priming_weights(&PrimingShape::EvenOnly { min: 6, max: 10 }).unwrap();
        assert_eq!(even.keys().copied().collect::<Vec<_>>(), vec![6, 8, 10]);
        assert!(even.values().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
        assert!(matches!(priming_weights(&PrimingShape::Uniform { min: 9, max: 6 }), Err(TaskError::EmptySupport)));
        assert!(matches!(priming_weights(&PrimingShape::EvenOnly { min: 7, max: 7 }), Err(TaskError::EmptySupport)));
        assert_eq!(PrimingShape::parse("uniform:6-35").unwrap(), PrimingShape::Uniform { min: 6, max: 35 });
        assert_eq!(PrimingShape::parse("pair:35").unwrap(), PrimingShape::Pair(35));
        assert!(PrimingShape::parse("triangle:3").is_err());
    }

    #[test]
    fn histogram_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hist.txt");
        fs::write(&path, "# priming lengths\n6 10\n20 30\n\n35 0\n").unwrap();
        let w = priming_weights(&PrimingShape::parse(&format!("file:{}", path.display())).unwrap()).unwrap();
        assert_eq!(w, BTreeMap::from([(6, 0.25), (20, 0.75)]));
        fs::write(&path, "6 ten\n").unwrap();
        assert!(matches!(load_priming_histogram(&path), Err(TaskError::Parse { line: 1, .. })));
    }

    fn mul_plan() -> TrainPlan {
        let task = TaskSpec::new(TaskKind::Mul, 35, 3, None).unwrap();
        TrainPlan::standard(task, 5, 5000, 11)
    }

    #[test]
    fn priming_composition() {
        let plan = mul_plan().with_priming(0.01, BTreeMap::from([(35, 1.0)]));
        let set = make_train_set(&plan).unwrap();
        assert_eq!(set.n_short, 4950);
        let p = set.priming.as_ref().unwrap();
        assert_eq!(p.fixed_examples.len(), 50);
        assert!(p.fixed_examples.iter().all(|e| e.x1.len() == 35 && e.x2.len() <= 3));

        let weights = priming_weights(&PrimingShape::Uniform { min: 6, max: 35 }).unwrap();
        let set = make_train_set(&mul_plan().with_priming(0.10, weights.clone())).unwrap();
        let p = set.priming.unwrap();
        assert_eq!(p.fixed_examples.len(), 500);
        assert!(p.fixed_examples.iter().all(|e| weights.contains_key(&e.x1.len())));
    }

    #[test]
    fn degenerate_priming_matches_standard() {
        let standard = make_train_set(&mul_plan()).unwrap();
        let primed = make_train_set(&mul_plan().with_priming(0.0, BTreeMap::from([(35, 1.0)]))).unwrap();
        assert!(primed.priming.is_none());
        assert_eq!(standard.epoch(3), primed.epoch(3));
    }

    #[test]
    fn priming_rate_validation() {
        let too_small = mul_plan().with_priming(0.0001, BTreeMap::from([(35, 1.0)]));
        assert!(matches!(make_train_set(&too_small), Err(TaskError::PrimingTooSmall { .. })));
        let too_big = mul_plan().with_priming(1.5, BTreeMap::from([(35, 1.0)]));
        assert!(matches!(make_train_set(&too_big), Err(TaskError::InvalidPlan(_))));
        let too_long = mul_plan().with_priming(0.01, BTreeMap::from([(36, 1.0)]));
        assert!(matches!(make_train_set(&too_long), Err(TaskError::InvalidPlan(_))));
        let mut mismatched = mul_plan();
        mismatched.procedure = Procedure::Priming;
        assert!(matches!(make_train_set(&mismatched), Err(TaskError::InvalidPlan(_))));
    }

    #[test]
    fn priming_fixed_across_epochs() {
        let plan = mul_plan().with_priming(0.01, BTreeMap::from([(35, 1.0)]));
        let set = make_train_set(&plan).unwrap();
        let hash_of = |e| {
            let primed: Vec<Example> =
                set.epoch(e).into_iter().filter(|(_, o)| *o == Origin::Priming).map(|(x, _)| x).collect();
            assert_eq!(primed.len(), 50);
            multiset_hash(&primed)
        };
        let h0 = hash_of(0);
        assert_eq!(h0, hash_of(1));
        assert_eq!(h0, hash_of(17));
        assert_ne!(set.epoch(0), set.epoch(1));
    }

    #[test]
    fn fine_tune_set_is_fixed() {
        let plan = mul_plan().with_fine_tune(35, 100);
        let set = make_train_set(&plan).unwrap();
        assert_eq!(set.fine.len(), 100);
        assert!(set.fine.iter().all(|e| e.x1.len() == 35));
        let a: HashSet<_> = set.fine_epoch(0).into_iter().map(|(e, _)| e).collect();
        let b: HashSet<_> = set.fine_epoch(1).into_iter().map(|(e, _)| e).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn eval_sets() {
        let mut rng = Rng::seed_from_u64(1);
        let id = make_eval_set(&TaskSpec::add_family(TaskKind::Add, 20, None).unwrap(), 5, 200, 5, &mut rng);
        assert!(id.in_distribution);
        assert!(id.examples.iter().all(|e| e.x1.len() == 5));
        let mul = TaskSpec::new(TaskKind::Mul, 35, 3, None).unwrap();
        let a = make_eval_set(&mul, 35, 50, 5, &mut rng);
        let b = make_eval_set(&mul, 35, 50, 5, &mut rng);
        assert!(!a.in_distribution);
        assert_ne!(a.examples, b.examples);
    }

    #[test]
    fn tsv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.tsv");
        let t = add3();
        let mut rng = Rng::seed_from_u64(2);
        let exs = make_eval_set(&t, 3, 20, 3, &mut rng).examples;
        write_examples_tsv(&path, &exs).unwrap();
        assert_eq!(read_examples_tsv(&path).unwrap(), exs);
    }
}
