//! Finite vocabularies, embodied languages, extensions and weakness.
//!
//! States are indices into a finite universe and programs are bitsets over
//! it. A statement is a set of program indices; it belongs to the language
//! when the programs it names share at least one state. Languages are kept
//! sorted so membership is a binary search.

use std::collections::HashSet;

use fixedbitset::FixedBitSet;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Largest universe the engine will materialise (2^24 states).
pub const MAX_STATES: usize = 1 << 24;

/// Largest language `Language::enumerate` will materialise.
pub const MAX_LANGUAGE: usize = 1 << 22;

/// Largest ground set for the subset-survival model.
pub const MAX_SURVIVAL_BITS: u32 = 62;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StateUniverse {
    size: usize,
}

impl StateUniverse {
    pub fn new(size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::arg("state universe must be nonempty"));
        }
        if size > MAX_STATES {
            return Err(Error::Capacity(format!(
                "{size} states exceeds the limit of {MAX_STATES}"
            )));
        }
        Ok(Self { size })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn all_states(&self) -> FixedBitSet {
        let mut bits = FixedBitSet::with_capacity(self.size);
        bits.insert_range(..);
        bits
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Program {
    members: FixedBitSet,
}

impl Program {
    pub fn from_states<I>(universe: StateUniverse, states: I) -> Result<Self>
    where
        I: IntoIterator<Item = usize>,
    {
        let mut members = FixedBitSet::with_capacity(universe.size());
        for s in states {
            if s >= universe.size() {
                return Err(Error::arg(format!(
                    "state {s} outside universe of size {}",
                    universe.size()
                )));
            }
            members.insert(s);
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &FixedBitSet {
        &self.members
    }

    pub fn contains(&self, state: usize) -> bool {
        self.members.contains(state)
    }
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    universe: StateUniverse,
    programs: Vec<Program>,
}

impl Vocabulary {
    pub fn new(universe: StateUniverse, programs: Vec<Program>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(programs.len());
        for (i, p) in programs.iter().enumerate() {
            if p.members.len() != universe.size() {
                return Err(Error::arg(format!(
                    "program {i} sized {} for universe of {}",
                    p.members.len(),
                    universe.size()
                )));
            }
            if !seen.insert(&p.members) {
                return Err(Error::arg(format!("program {i} duplicates an earlier program")));
            }
        }
        Ok(Self { universe, programs })
    }

    pub fn universe(&self) -> StateUniverse {
        self.universe
    }

    pub fn len(&self) -> usize {
        self.programs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.programs.is_empty()
    }

    pub fn program(&self, index: usize) -> Option<&Program> {
        self.programs.get(index)
    }

    pub fn programs(&self) -> &[Program] {
        &self.programs
    }
}

/// A set of program indices, kept sorted and duplicate-free.
///
/// Membership in a language (consistency) is not a type invariant; see
/// [`is_statement`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Statement(Vec<u32>);

impl Statement {
    pub fn new<I: IntoIterator<Item = u32>>(indices: I) -> Self {
        let mut v: Vec<u32> = indices.into_iter().collect();
        v.sort_unstable();
        v.dedup();
        Statement(v)
    }

    pub fn empty() -> Self {
        Statement(Vec::new())
    }

    pub fn indices(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `self ⊆ other`, by a merge over the two sorted index lists.
    pub fn is_subset_of(&self, other: &Statement) -> bool {
        if self.0.len() > other.0.len() {
            return false;
        }
        let mut it = other.0.iter();
        'outer: for a in &self.0 {
            for b in it.by_ref() {
                if b == a {
                    continue 'outer;
                }
                if b > a {
                    return false;
                }
            }
            return false;
        }
        true
    }

    pub fn union(&self, other: &Statement) -> Statement {
        Statement::new(self.0.iter().chain(other.0.iter()).copied())
    }
}

fn check_indices(s: &Statement, v: &Vocabulary) -> Result<()> {
    match s.0.last() {
        Some(&i) if i as usize >= v.len() => Err(Error::arg(format!(
            "program index {i} out of range for vocabulary of {}",
            v.len()
        ))),
        _ => Ok(()),
    }
}

/// Intersection of the named programs; the empty statement yields every state.
pub fn truth_set(s: &Statement, v: &Vocabulary) -> Result<FixedBitSet> {
    check_indices(s, v)?;
    let mut truth = v.universe.all_states();
    for &i in &s.0 {
        truth.intersect_with(&v.programs[i as usize].members);
    }
    Ok(truth)
}

pub fn is_statement(s: &Statement, v: &Vocabulary) -> Result<bool> {
    Ok(!truth_set(s, v)?.is_clear())
}

/// The embodied language of a vocabulary: every consistent subset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Language {
    statements: Vec<Statement>,
}

impl Language {
    /// Enumerates consistent subsets depth-first, extending a subset only
    /// while its truth set stays nonempty (consistency is inherited by
    /// subsets, so pruned branches hold no statements).
    pub fn enumerate(v: &Vocabulary) -> Result<Self> {
        let mut out = Vec::new();
        let mut current = Vec::new();
        let all = v.universe.all_states();
        extend_consistent(v, 0, &mut current, &all, &mut out)?;
        out.sort_unstable();
        Ok(Self { statements: out })
    }

    pub fn from_statements(mut statements: Vec<Statement>) -> Self {
        statements.sort_unstable();
        statements.dedup();
        Self { statements }
    }

    pub fn len(&self) -> usize {
        self.statements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.statements.is_empty()
    }

    pub fn statements(&self) -> &[Statement] {
        &self.statements
    }

    pub fn index_of(&self, s: &Statement) -> Option<usize> {
        self.statements.binary_search(s).ok()
    }

    pub fn contains(&self, s: &Statement) -> bool {
        self.index_of(s).is_some()
    }

    fn require(&self, s: &Statement) -> Result<()> {
        if self.contains(s) {
            Ok(())
        } else {
            Err(Error::arg(format!("{:?} is not in the language", s.0)))
        }
    }

    /// Ext(x) as a membership mask over this language's statements.
    pub fn extension_mask(&self, x: &Statement) -> Result<Vec<bool>> {
        self.require(x)?;
        Ok(self.statements.iter().map(|y| x.is_subset_of(y)).collect())
    }

    /// Ext(x) = { y in L : x ⊆ y }.
    pub fn extension(&self, x: &Statement) -> Result<Vec<&Statement>> {
        self.require(x)?;
        Ok(self.statements.iter().filter(|y| x.is_subset_of(y)).collect())
    }

    pub fn weakness(&self, x: &Statement) -> Result<usize> {
        self.require(x)?;
        Ok(self.statements.iter().filter(|y| x.is_subset_of(y)).count())
    }

    /// Ext(X) = ∪ Ext(x) over a set of statements, as a mask.
    pub fn extension_of_set(&self, xs: &[Statement]) -> Result<Vec<bool>> {
        let mut mask = vec![false; self.len()];
        for x in xs {
            for (m, e) in mask.iter_mut().zip(self.extension_mask(x)?) {
                *m |= e;
            }
        }
        Ok(mask)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.statements).expect("statements serialise")
    }
}

fn extend_consistent(
    v: &Vocabulary,
    start: usize,
    current: &mut Vec<u32>,
    truth: &FixedBitSet,
    out: &mut Vec<Statement>,
) -> Result<()> {
    if out.len() >= MAX_LANGUAGE {
        return Err(Error::Capacity(format!(
            "language exceeds {MAX_LANGUAGE} statements"
        )));
    }
    out.push(Statement(current.clone()));
    for i in start..v.len() {
        let mut next = truth.clone();
        next.intersect_with(&v.programs[i].members);
        if !next.is_clear() {
            current.push(i as u32);
            extend_consistent(v, i + 1, current, &next, out)?;
            current.pop();
        }
    }
    Ok(())
}

/// A v-task: inputs and the outputs demanded of them, O ⊆ Ext(I).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Task {
    inputs: Vec<Statement>,
    outputs: Vec<Statement>,
}

impl Task {
    pub fn new(inputs: Vec<Statement>, outputs: Vec<Statement>, language: &Language) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::arg("task needs at least one input"));
        }
        let ext_inputs = language.extension_of_set(&inputs)?;
        for o in &outputs {
            let idx = language
                .index_of(o)
                .ok_or_else(|| Error::arg(format!("output {:?} not in the language", o.0)))?;
            if !ext_inputs[idx] {
                return Err(Error::arg(format!("output {:?} lies outside Ext(inputs)", o.0)));
            }
        }
        let inputs = Language::from_statements(inputs).statements;
        let outputs = Language::from_statements(outputs).statements;
        Ok(Self { inputs, outputs })
    }

    pub fn inputs(&self) -> &[Statement] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[Statement] {
        &self.outputs
    }

    fn output_mask(&self, language: &Language) -> Vec<bool> {
        let mut mask = vec![false; language.len()];
        for o in &self.outputs {
            if let Some(i) = language.index_of(o) {
                mask[i] = true;
            }
        }
        mask
    }

    /// |Ext(π) ∩ U| where U = L \ Ext(I).
    pub fn buffer_size(&self, policy: &Statement, language: &Language) -> Result<usize> {
        let ext_inputs = language.extension_of_set(&self.inputs)?;
        let ext_policy = language.extension_mask(policy)?;
        Ok(ext_policy
            .iter()
            .zip(&ext_inputs)
            .filter(|(&p, &i)| p && !i)
            .count())
    }
}

/// Every π in L with Ext(I) ∩ Ext(π) = O.
pub fn correct_policies(task: &Task, language: &Language) -> Result<Vec<Statement>> {
    let ext_inputs = language.extension_of_set(&task.inputs)?;
    let outputs = task.output_mask(language);
    let mut policies = Vec::new();
    for pi in language.statements() {
        let ext_pi = language.extension_mask(pi)?;
        let correct = ext_pi
            .iter()
            .zip(&ext_inputs)
            .zip(&outputs)
            .all(|((&p, &i), &o)| (p && i) == o);
        if correct {
            policies.push(pi.clone());
        }
    }
    Ok(policies)
}

/// Probability that a uniformly drawn S ⊆ U lands inside a buffer of size
/// `buffer`: 2^|B| / 2^|U|.
pub fn survival_probability(buffer: u32, unseen: u32) -> Result<f64> {
    if buffer > unseen {
        return Err(Error::arg(format!("buffer {buffer} larger than unseen set {unseen}")));
    }
    if unseen > MAX_SURVIVAL_BITS {
        return Err(Error::Capacity(format!("unseen set of {unseen} exceeds {MAX_SURVIVAL_BITS}")));
    }
    Ok(2f64.powi(buffer as i32 - unseen as i32))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurvivalEstimate {
    pub estimate: f64,
    pub survived: u64,
    pub n_samples: u64,
    pub seed: u64,
}

/// Monte-Carlo version of [`survival_probability`]. Sets are bit masks over
/// a ground set of at most 62 elements; `buffer` must be a subset of
/// `unseen`. Each draw keeps every element of U independently with
/// probability 1/2, which is the uniform law on 2^U.
pub fn survival_mc(buffer: u64, unseen: u64, n_samples: u64, seed: u64) -> Result<SurvivalEstimate> {
    if buffer & !unseen != 0 {
        return Err(Error::arg("buffer is not a subset of the unseen set"));
    }
    if unseen.count_ones() > MAX_SURVIVAL_BITS || unseen >> 62 != 0 {
        return Err(Error::Capacity(format!(
            "unseen set must live in the low {MAX_SURVIVAL_BITS} bits"
        )));
    }
    if n_samples == 0 {
        return Err(Error::arg("need at least one sample"));
    }
    let mut rng = rng::rng(seed);
    let outside = unseen & !buffer;
    let survived = (0..n_samples)
        .filter(|_| rng.next_u64() & outside == 0)
        .count() as u64;
    Ok(SurvivalEstimate {
        estimate: survived as f64 / n_samples as f64,
        survived,
        n_samples,
        seed,
    })
}

/// KL(Q‖P₀) for a uniform posterior on a buffer of measure `buffer_measure`
/// against the normalised prior on a language of measure `total_measure`.
pub fn kl_uniform(total_measure: f64, buffer_measure: f64) -> Result<f64> {
    if !(total_measure.is_finite() && buffer_measure.is_finite()) {
        return Err(Error::arg("measures must be finite"));
    }
    if buffer_measure <= 0.0 || buffer_measure > total_measure {
        return Err(Error::arg(format!(
            "need 0 < buffer ({buffer_measure}) <= total ({total_measure})"
        )));
    }
    Ok((total_measure / buffer_measure).ln())
}

/// Vocabulary of programs "region r is classified as c" over the K^R total
/// classification functions. Program `r * classes + c` holds the states
/// whose base-K digit r equals c.
pub fn region_class_vocab(regions: usize, classes: usize) -> Result<Vocabulary> {
    if regions == 0 || classes == 0 {
        return Err(Error::arg("need at least one region and one class"));
    }
    if classes == 1 && regions > 1 {
        // every "region r has class 0" program would be the whole universe
        return Err(Error::arg("a single class over several regions gives duplicate programs"));
    }
    let states = (0..regions).try_fold(1usize, |acc, _| {
        acc.checked_mul(classes).filter(|&n| n <= MAX_STATES)
    });
    let states = states.ok_or_else(|| {
        Error::Capacity(format!("{classes}^{regions} states exceeds {MAX_STATES}"))
    })?;
    let universe = StateUniverse::new(states)?;
    let mut programs = Vec::with_capacity(regions * classes);
    let mut stride = 1usize;
    for _ in 0..regions {
        for c in 0..classes {
            let members = (0..states).filter(|g| (g / stride) % classes == c);
            programs.push(Program::from_states(universe, members)?);
        }
        stride *= classes;
    }
    Vocabulary::new(universe, programs)
}

/// Statement assigning `class` to `region` for each pair, in a region-class
/// vocabulary with `classes` classes.
pub fn region_class_statement(assignments: &[(usize, usize)], classes: usize) -> Statement {
    Statement::new(assignments.iter().map(|&(r, c)| (r * classes + c) as u32))
}
