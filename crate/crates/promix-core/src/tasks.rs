//! Synthetic multi-task benchmarks.
//!
//! Every task is a binary sequence classification problem drawn from a
//! small rule family. Rules read different surface features (token counts,
//! presence, parity, endpoint order), so tasks genuinely differ in what the
//! encoder must attend to. The conflict profile additionally forces chosen
//! task pairs to share identical input sequences under rules that disagree
//! on them, which is what makes naive full sharing hurt.
//!
//! Generation is deterministic in `(T, seed, profile)`: every task draws
//! from its own named streams, and splits within a task never share a
//! sequence.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::CoreError;
use crate::rng::Rng;

/// Token ids live in `[TOKEN_LO, TOKEN_HI]`; 0 stays reserved.
pub const TOKEN_LO: u32 = 1;
pub const TOKEN_HI: u32 = 16;

pub const DEFAULT_TRAIN_PER_TASK: usize = 192;
pub const DEFAULT_VAL_PER_TASK: usize = 64;
pub const DEFAULT_TEST_PER_TASK: usize = 64;
pub const DEFAULT_MIN_LEN: usize = 8;
pub const DEFAULT_MAX_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RuleKind {
    /// Label 1 when token `b` occurs strictly more often than token `a`.
    MajorityToken { a: u32, b: u32 },
    /// Label 1 when token `v` occurs at least once.
    TokenPresence { v: u32 },
    /// Label is the parity of the number of occurrences of `v`.
    CountParity { v: u32 },
    /// Label 1 when the first token is strictly greater than the last.
    FirstVsLast,
}

impl RuleKind {
    pub fn label(&self, tokens: &[u32]) -> usize {
        match *self {
            RuleKind::MajorityToken { a, b } => {
                let ca = tokens.iter().filter(|&&t| t == a).count();
                let cb = tokens.iter().filter(|&&t| t == b).count();
                usize::from(cb > ca)
            }
            RuleKind::TokenPresence { v } => usize::from(tokens.contains(&v)),
            RuleKind::CountParity { v } => tokens.iter().filter(|&&t| t == v).count() % 2,
            RuleKind::FirstVsLast => {
                usize::from(tokens.first().copied() > tokens.last().copied())
            }
        }
    }

    pub fn describe(&self) -> String {
        match *self {
            RuleKind::MajorityToken { a, b } => format!("majority({a},{b})"),
            RuleKind::TokenPresence { v } => format!("presence({v})"),
            RuleKind::CountParity { v } => format!("parity({v})"),
            RuleKind::FirstVsLast => String::from("first-vs-last"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConflictProfile {
    /// Independent inputs for every task.
    None,
    /// Task pairs (4i, 4i+1) share input sequences under different rules.
    Paired,
}

impl ConflictProfile {
    pub fn as_str(&self) -> &'static str {
        match self {
            ConflictProfile::None => "none",
            ConflictProfile::Paired => "conflict",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(ConflictProfile::None),
            "conflict" => Some(ConflictProfile::Paired),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub id: usize,
    pub name: String,
    pub classes: usize,
    pub rule: RuleKind,
    /// Id of the task whose inputs this one shares, if any.
    pub conflicts_with: Option<usize>,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSuite {
    pub tasks: Vec<Task>,
    pub seed: u64,
    pub profile: ConflictProfile,
}

impl TaskSuite {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Clones the chosen tasks, keeping their original ids so parameter
    /// names and data streams stay aligned with the full suite.
    pub fn subset(&self, ids: &[usize]) -> TaskSuite {
        let tasks = ids
            .iter()
            .map(|&i| self.tasks[i].clone())
            .collect();
        TaskSuite {
            tasks,
            seed: self.seed,
            profile: self.profile,
        }
    }
}

/// Generation knobs beyond the public `(T, seed, profile)` triple.
#[derive(Debug, Clone, PartialEq)]
pub struct GenSpec {
    pub tasks: usize,
    pub seed: u64,
    pub profile: ConflictProfile,
    pub train_per_task: usize,
    pub val_per_task: usize,
    pub test_per_task: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl GenSpec {
    pub fn new(tasks: usize, seed: u64, profile: ConflictProfile) -> Self {
        GenSpec {
            tasks,
            seed,
            profile,
            train_per_task: DEFAULT_TRAIN_PER_TASK,
            val_per_task: DEFAULT_VAL_PER_TASK,
            test_per_task: DEFAULT_TEST_PER_TASK,
            min_len: DEFAULT_MIN_LEN,
            max_len: DEFAULT_MAX_LEN,
        }
    }
}

pub fn generate_tasks(
    tasks: usize,
    seed: u64,
    profile: ConflictProfile,
) -> Result<TaskSuite, CoreError> {
    generate_tasks_with(&GenSpec::new(tasks, seed, profile))
}

pub fn generate_tasks_with(spec: &GenSpec) -> Result<TaskSuite, CoreError> {
    if spec.tasks == 0 {
        return Err(CoreError::TaskGeneration(String::from(
            "task count must be positive",
        )));
    }
    if spec.min_len < 4 || spec.min_len > spec.max_len {
        return Err(CoreError::TaskGeneration(format!(
            "bad length range {}..{}",
            spec.min_len, spec.max_len
        )));
    }
    let mut tasks: Vec<Task> = Vec::with_capacity(spec.tasks);
    for id in 0..spec.tasks {
        let shared_source = match spec.profile {
            ConflictProfile::Paired if id % 4 == 1 => Some(id - 1),
            _ => None,
        };
        let task = match shared_source {
            None => generate_independent_task(spec, id)?,
            Some(src) => generate_conflicting_partner(spec, id, &tasks[src])?,
        };
        tasks.push(task);
    }
    Ok(TaskSuite {
        tasks,
        seed: spec.seed,
        profile: spec.profile,
    })
}

fn rule_for(spec: &GenSpec, id: usize, attempt: u64) -> RuleKind {
    let mut rng = Rng::derive(spec.seed, "task.rule", (id as u64) << 16 | attempt);
    let span = TOKEN_HI - TOKEN_LO + 1;
    let draw = |rng: &mut Rng| TOKEN_LO + rng.next_below(span as usize) as u32;
    match id % 4 {
        0 => {
            let a = draw(&mut rng);
            let mut b = draw(&mut rng);
            while b == a {
                b = draw(&mut rng);
            }
            RuleKind::MajorityToken { a, b }
        }
        1 => RuleKind::TokenPresence { v: draw(&mut rng) },
        2 => RuleKind::CountParity { v: draw(&mut rng) },
        _ => RuleKind::FirstVsLast,
    }
}

/// Tokens a constructed example must avoid in its filler positions so the
/// planted counts are the only occurrences the rule sees.
fn reserved_tokens(rule: &RuleKind) -> Vec<u32> {
    match *rule {
        RuleKind::MajorityToken { a, b } => alloc::vec![a, b],
        RuleKind::TokenPresence { v } | RuleKind::CountParity { v } => alloc::vec![v],
        RuleKind::FirstVsLast => Vec::new(),
    }
}

fn draw_filler(rng: &mut Rng, reserved: &[u32]) -> u32 {
    loop {
        let t = TOKEN_LO + rng.next_below((TOKEN_HI - TOKEN_LO + 1) as usize) as u32;
        if !reserved.contains(&t) {
            return t;
        }
    }
}

fn shuffle(rng: &mut Rng, xs: &mut [u32]) {
    for i in (1..xs.len()).rev() {
        let j = rng.next_below(i + 1);
        xs.swap(i, j);
    }
}

/// Builds one example whose label under `rule` equals `want`.
fn construct_example(rng: &mut Rng, rule: &RuleKind, spec: &GenSpec, want: usize) -> Example {
    let len = spec.min_len + rng.next_below(spec.max_len - spec.min_len + 1);
    let reserved = reserved_tokens(rule);
    let mut tokens: Vec<u32>;
    match *rule {
        RuleKind::MajorityToken { a, b } => {
            let winner_count = 2 + rng.next_below(2);
            let loser_count = rng.next_below(winner_count);
            let (ca, cb) = if want == 1 {
                (loser_count, winner_count)
            } else {
                (winner_count, loser_count)
            };
            tokens = Vec::with_capacity(len);
            tokens.extend(core::iter::repeat(a).take(ca));
            tokens.extend(core::iter::repeat(b).take(cb));
            while tokens.len() < len {
                tokens.push(draw_filler(rng, &reserved));
            }
            shuffle(rng, &mut tokens);
        }
        RuleKind::TokenPresence { v } => {
            let count = if want == 1 { 1 + rng.next_below(2) } else { 0 };
            tokens = Vec::with_capacity(len);
            tokens.extend(core::iter::repeat(v).take(count));
            while tokens.len() < len {
                tokens.push(draw_filler(rng, &reserved));
            }
            shuffle(rng, &mut tokens);
        }
        RuleKind::CountParity { v } => {
            let count = 2 * rng.next_below(2) + want;
            tokens = Vec::with_capacity(len);
            tokens.extend(core::iter::repeat(v).take(count));
            while tokens.len() < len {
                tokens.push(draw_filler(rng, &reserved));
            }
            shuffle(rng, &mut tokens);
        }
        RuleKind::FirstVsLast => {
            tokens = (0..len).map(|_| draw_filler(rng, &[])).collect();
            let mut first = draw_filler(rng, &[]);
            let mut last = draw_filler(rng, &[]);
            while first == last {
                last = draw_filler(rng, &[]);
            }
            if (first > last) != (want == 1) {
                core::mem::swap(&mut first, &mut last);
            }
            tokens[0] = first;
            let end = tokens.len() - 1;
            tokens[end] = last;
        }
    }
    debug_assert_eq!(rule.label(&tokens), want, "constructed label mismatch");
    Example {
        tokens,
        label: want,
    }
}

fn generate_independent_task(spec: &GenSpec, id: usize) -> Result<Task, CoreError> {
    let rule = rule_for(spec, id, 0);
    let mut rng = Rng::derive(spec.seed, "task.data", id as u64);
    let total = spec.train_per_task + spec.val_per_task + spec.test_per_task;
    let mut seen: BTreeSet<Vec<u32>> = BTreeSet::new();
    let mut examples: Vec<Example> = Vec::with_capacity(total);
    let mut attempts = 0usize;
    while examples.len() < total {
        attempts += 1;
        if attempts > total * 200 {
            return Err(CoreError::TaskGeneration(format!(
                "task {id}: could not draw {total} distinct sequences"
            )));
        }
        let want = examples.len() % 2;
        let ex = construct_example(&mut rng, &rule, spec, want);
        if seen.insert(ex.tokens.clone()) {
            examples.push(ex);
        }
    }
    let val_at = spec.train_per_task;
    let test_at = val_at + spec.val_per_task;
    let test = examples.split_off(test_at);
    let val = examples.split_off(val_at);
    Ok(Task {
        id,
        name: format!("t{id}-{}", rule.describe()),
        classes: 2,
        rule,
        conflicts_with: None,
        train: examples,
        val,
        test,
    })
}

/// Partner task in a conflict pair: identical input sequences, relabeled by
/// its own rule. Retries rule parameters until both labels occur with at
/// least 20% frequency in the training split (so the task stays learnable)
/// and the two rules disagree on at least 30% of the shared inputs (so the
/// pair exerts real pressure on any prompt they share).
fn generate_conflicting_partner(
    spec: &GenSpec,
    id: usize,
    source: &Task,
) -> Result<Task, CoreError> {
    for attempt in 0..64u64 {
        let rule = rule_for(spec, id, attempt);
        let relabel = |xs: &[Example]| -> Vec<Example> {
            xs.iter()
                .map(|ex| Example {
                    tokens: ex.tokens.clone(),
                    label: rule.label(&ex.tokens),
                })
                .collect()
        };
        let train = relabel(&source.train);
        let minority = train
            .iter()
            .filter(|ex| ex.label == 1)
            .count()
            .min(train.iter().filter(|ex| ex.label == 0).count());
        if (minority as f64) < 0.2 * train.len() as f64 {
            continue;
        }
        let disagreements = train
            .iter()
            .zip(source.train.iter())
            .filter(|(mine, theirs)| mine.label != theirs.label)
            .count();
        if (disagreements as f64) < 0.3 * train.len() as f64 {
            continue;
        }
        return Ok(Task {
            id,
            name: format!("t{id}-{}", rule.describe()),
            classes: 2,
            rule,
            conflicts_with: Some(source.id),
            train,
            val: relabel(&source.val),
            test: relabel(&source.test),
        });
    }
    Err(CoreError::TaskGeneration(format!(
        "task {id}: no rule parameters produced balanced conflicting labels"
    )))
}
