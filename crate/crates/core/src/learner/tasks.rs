//! Synthetic arithmetic word problems.
//!
//! Two template families share the same operations. The canonical family
//! ("What is 3 plus 4?") is the in-distribution pretraining data; the story
//! family phrases the same arithmetic as a short narrative and is what the
//! base model has never seen.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SageError};
use crate::sample::Sample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[clap(rename_all = "snake_case")]
pub enum TaskKind {
    Add,
    Sub,
    Mul,
    TwoStep,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [TaskKind::Add, TaskKind::Sub, TaskKind::Mul, TaskKind::TwoStep];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Add => "add",
            TaskKind::Sub => "sub",
            TaskKind::Mul => "mul",
            TaskKind::TwoStep => "two_step",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum TemplateFamily {
    Canonical,
    Story,
}

impl TemplateFamily {
    fn name(self) -> &'static str {
        match self {
            TemplateFamily::Canonical => "canonical",
            TemplateFamily::Story => "story",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSample {
    pub question: String,
    /// Integer literal.
    pub answer: String,
    pub level: u32,
    /// `<family>/<kind>`, e.g. `story/add`.
    pub template: String,
    pub family: TemplateFamily,
    pub kind: TaskKind,
}

impl TaskSample {
    /// Stream sample labelled 0 for the canonical family and 1 otherwise.
    pub fn to_sample(&self) -> Sample {
        let label = match self.family {
            TemplateFamily::Canonical => 0,
            TemplateFamily::Story => 1,
        };
        let mut s = Sample::new(self.question.clone(), self.answer.clone(), Some(label));
        s.template = Some(self.template.clone());
        s
    }
}

fn render(family: TemplateFamily, kind: TaskKind, a: i64, b: i64, c: i64) -> String {
    match (family, kind) {
        (TemplateFamily::Canonical, TaskKind::Add) => format!("What is {a} plus {b}?"),
        (TemplateFamily::Canonical, TaskKind::Sub) => format!("What is {a} minus {b}?"),
        (TemplateFamily::Canonical, TaskKind::Mul) => format!("What is {a} times {b}?"),
        (TemplateFamily::Canonical, TaskKind::TwoStep) => format!("What is {a} plus {b} minus {c}?"),
        (TemplateFamily::Story, TaskKind::Add) => format!(
            "Sam had {a} marbles and then found {b} more marbles. How many marbles does Sam have now?"
        ),
        (TemplateFamily::Story, TaskKind::Sub) => format!(
            "A baker made {a} loaves of bread and sold {b} loaves by noon. How many loaves are left on the shelf?"
        ),
        (TemplateFamily::Story, TaskKind::Mul) => format!(
            "A teacher filled {a} boxes with {b} crayons in each box. How many crayons are there in total?"
        ),
        (TemplateFamily::Story, TaskKind::TwoStep) => format!(
            "A bus left the depot with {a} riders, picked up {b} at the first stop and dropped {c} at the second stop. How many riders remain on the bus?"
        ),
    }
}

/// Draws operands and the exact answer. Multiplication stays within times
/// tables (0..=12); subtraction never goes negative.
fn draw(kind: TaskKind, rng: &mut ChaCha8Rng) -> (i64, i64, i64, i64) {
    match kind {
        TaskKind::Add => {
            let (a, b) = (rng.random_range(0..=99), rng.random_range(0..=99));
            (a, b, 0, a + b)
        }
        TaskKind::Sub => {
            let (x, y) = (rng.random_range(0..=99), rng.random_range(0..=99));
            let (a, b) = (x.max(y), x.min(y));
            (a, b, 0, a - b)
        }
        TaskKind::Mul => {
            let (a, b) = (rng.random_range(0..=12), rng.random_range(0..=12));
            (a, b, 0, a * b)
        }
        TaskKind::TwoStep => {
            let (a, b) = (rng.random_range(0..=99), rng.random_range(0..=99));
            let c = rng.random_range(0..=a + b);
            (a, b, c, a + b - c)
        }
    }
}

/// Generates `n` tasks of one kind and family.
pub fn gen_tasks(family: TemplateFamily, kind: TaskKind, level: u32, n: usize, seed: u64) -> Result<Vec<TaskSample>> {
    if n == 0 {
        return Err(SageError::InvalidInput("n must be at least 1".into()));
    }
    if level == 0 {
        return Err(SageError::InvalidInput("level must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let (a, b, c, ans) = draw(kind, &mut rng);
            TaskSample {
                question: render(family, kind, a, b, c),
                answer: ans.to_string(),
                level,
                template: format!("{}/{}", family.name(), kind.name()),
                family,
                kind,
            }
        })
        .collect())
}

/// Story-family word problems, the out-of-distribution tasks.
pub fn gen_atomic_tasks(kind: TaskKind, level: u32, n: usize, seed: u64) -> Result<Vec<TaskSample>> {
    gen_tasks(TemplateFamily::Story, kind, level, n, seed)
}

/// Canonical-family add, sub and mul tasks, `per_kind` of each, interleaved.
pub fn gen_id_tasks(per_kind: usize, seed: u64) -> Result<Vec<TaskSample>> {
    let kinds = [TaskKind::Add, TaskKind::Sub, TaskKind::Mul];
    let lists = kinds
        .iter()
        .enumerate()
        .map(|(i, &k)| gen_tasks(TemplateFamily::Canonical, k, 1, per_kind, seed.wrapping_add(i as u64 * 7919)))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(per_kind * kinds.len());
    for i in 0..per_kind {
        for l in &lists {
            out.push(l[i].clone());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numbers(q: &str) -> Vec<i64> {
        q.split(|c: char| !c.is_ascii_digit())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().unwrap())
            .collect()
    }

    // re-derives the answer from the wording alone
    fn recompute(q: &str) -> i64 {
        let n = numbers(q);
        if q.contains("times") || q.contains("in each") {
            n[0] * n[1]
        } else if q.contains("picked up") || q.contains("plus") && q.contains("minus") {
            n[0] + n[1] - n[2]
        } else if q.contains("minus") || q.contains(" sold ") {
            n[0] - n[1]
        } else {
            n[0] + n[1]
        }
    }

    #[test]
    fn single_add_sample() {
        let t = gen_atomic_tasks(TaskKind::Add, 1, 1, 7).unwrap();
        assert_eq!(t.len(), 1);
        let n = numbers(&t[0].question);
        assert_eq!(t[0].answer, (n[0] + n[1]).to_string());
    }

    #[test]
    fn deterministic() {
        assert_eq!(gen_atomic_tasks(TaskKind::Sub, 1, 20, 3).unwrap(), gen_atomic_tasks(TaskKind::Sub, 1, 20, 3).unwrap());
        assert!(gen_atomic_tasks(TaskKind::Sub, 1, 0, 3).is_err());
    }

    #[test]
    fn answers_match_parse_and_recompute() {
        for family in [TemplateFamily::Canonical, TemplateFamily::Story] {
            for kind in TaskKind::ALL {
                for t in gen_tasks(family, kind, 1, 1000, 11).unwrap() {
                    assert_eq!(t.answer, recompute(&t.question).to_string(), "{}", t.question);
                    assert!(t.answer.parse::<i64>().unwrap() >= 0);
                }
            }
        }
    }

    #[test]
    fn id_tasks_interleave_kinds() {
        let t = gen_id_tasks(2, 1).unwrap();
        let kinds: Vec<TaskKind> = t.iter().map(|x| x.kind).collect();
        assert_eq!(kinds, [TaskKind::Add, TaskKind::Sub, TaskKind::Mul].repeat(2));
        assert!(t.iter().all(|x| x.to_sample().label == Some(0)));
    }
}
