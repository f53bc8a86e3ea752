use serde::{Deserialize, Serialize};

use super::ObjectiveError;
use crate::text::{detokenize, NliLabel, Tokens, Veracity};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Task {
    Nli,
    Summ,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Nli => "NLI",
            Task::Summ => "SUMM",
        }
    }
}

/// NLU maps a text pair to an answer word; NLG maps text and label to the
/// second text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Direction {
    Nlu,
    Nlg,
}

/// The label word used as a control code in generation prompts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskLabel {
    Entailed,
    Neutral,
    Contradictory,
}

impl TaskLabel {
    pub const ALL: [TaskLabel; 3] = [TaskLabel::Entailed, TaskLabel::Neutral, TaskLabel::Contradictory];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskLabel::Entailed => "entailed",
            TaskLabel::Neutral => "neutral",
            TaskLabel::Contradictory => "contradictory",
        }
    }

    pub fn from_nli(l: NliLabel) -> TaskLabel {
        match l {
            NliLabel::Entailment => TaskLabel::Entailed,
            NliLabel::Neutral => TaskLabel::Neutral,
            NliLabel::Contradiction => TaskLabel::Contradictory,
        }
    }

    pub fn to_nli(self) -> NliLabel {
        match self {
            TaskLabel::Entailed => NliLabel::Entailment,
            TaskLabel::Neutral => NliLabel::Neutral,
            TaskLabel::Contradictory => NliLabel::Contradiction,
        }
    }

    pub fn from_veracity(v: Veracity) -> TaskLabel {
        match v {
            Veracity::Entailed => TaskLabel::Entailed,
            Veracity::Contradictory => TaskLabel::Contradictory,
        }
    }

    pub fn to_veracity(self) -> Option<Veracity> {
        match self {
            TaskLabel::Entailed => Some(Veracity::Entailed),
            TaskLabel::Neutral => None,
            TaskLabel::Contradictory => Some(Veracity::Contradictory),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskExample {
    pub task: Task,
    pub direction: Direction,
    /// Premise or document.
    pub x1: Tokens,
    /// Hypothesis or summary.
    pub x2: Tokens,
    pub label: TaskLabel,
}

impl TaskExample {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if self.task == Task::Summ && self.label == TaskLabel::Neutral {
            return Err(ObjectiveError::NeutralSummary);
        }
        Ok(())
    }
}

pub fn label_to_answer(task: Task, label: TaskLabel) -> Result<&'static str, ObjectiveError> {
    match (task, label) {
        (_, TaskLabel::Entailed) => Ok("True"),
        (_, TaskLabel::Contradictory) => Ok("False"),
        (Task::Nli, TaskLabel::Neutral) => Ok("Neither"),
        (Task::Summ, TaskLabel::Neutral) => Err(ObjectiveError::NeutralSummary),
    }
}

pub fn answer_to_label(task: Task, answer: &str) -> Result<TaskLabel, ObjectiveError> {
    match (task, answer) {
        (_, "True") => Ok(TaskLabel::Entailed),
        (_, "False") => Ok(TaskLabel::Contradictory),
        (Task::Nli, "Neither") => Ok(TaskLabel::Neutral),
        _ => Err(ObjectiveError::UnknownAnswer { task: task.as_str(), answer: answer.to_string() }),
    }
}

/// Input and target strings for one example.
pub fn format_prompt(ex: &TaskExample) -> Result<(String, String), ObjectiveError> {
    ex.validate()?;
    let x1 = detokenize(&ex.x1);
    let x2 = detokenize(&ex.x2);
    let label = ex.label.as_str();
    Ok(match (ex.task, ex.direction) {
        (Task::Nli, Direction::Nlg) => (format!("Generate a {label} sentence of: {x1}"), x2),
        (Task::Nli, Direction::Nlu) => (
            format!("{x1} Question: {x2} True, False or Neither?"),
            label_to_answer(Task::Nli, ex.label)?.to_string(),
        ),
        (Task::Summ, Direction::Nlg) => (format!("Generate a {label} summary of: {x1}"), x2),
        (Task::Summ, Direction::Nlu) => (
            format!("{x1} Question: {x2} True or False?"),
            label_to_answer(Task::Summ, ex.label)?.to_string(),
        ),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::tokenize;

    fn ex(task: Task, direction: Direction, label: TaskLabel) -> TaskExample {
        TaskExample { task, direction, x1: tokenize("p q"), x2: tokenize("r s"), label }
    }

    #[test]
    fn nli_generation_prompt() {
        let (input, target) = format_prompt(&ex(Task::Nli, Direction::Nlg, TaskLabel::Entailed)).unwrap();
        assert_eq!(input, "Generate a entailed sentence of: p q");
        assert_eq!(target, "r s");
    }

    #[test]
    fn understanding_targets() {
        let (input, target) = format_prompt(&ex(Task::Nli, Direction::Nlu, TaskLabel::Entailed)).unwrap();
        assert_eq!(input, "p q Question: r s True, False or Neither?");
        assert_eq!(target, "True");
        let (input, target) = format_prompt(&ex(Task::Summ, Direction::Nlu, TaskLabel::Contradictory)).unwrap();
        assert_eq!(input, "p q Question: r s True or False?");
        assert_eq!(target, "False");
    }

    #[test]
    fn neutral_summary_rejected() {
        for d in [Direction::Nlu, Direction::Nlg] {
            assert_eq!(format_prompt(&ex(Task::Summ, d, TaskLabel::Neutral)), Err(ObjectiveError::NeutralSummary));
        }
    }

    #[test]
    fn answer_mapping_is_a_bijection() {
        assert_eq!(answer_to_label(Task::Nli, "Neither"), Ok(TaskLabel::Neutral));
        assert!(answer_to_label(Task::Summ, "Neither").is_err());
        assert!(answer_to_label(Task::Nli, "true").is_err());
        for l in TaskLabel::ALL {
            assert_eq!(answer_to_label(Task::Nli, label_to_answer(Task::Nli, l).unwrap()), Ok(l));
        }
        for l in [TaskLabel::Entailed, TaskLabel::Contradictory] {
            assert_eq!(answer_to_label(Task::Summ, label_to_answer(Task::Summ, l).unwrap()), Ok(l));
        }
        for l in NliLabel::ALL {
            assert_eq!(TaskLabel::from_nli(l).to_nli(), l);
        }
    }
}
