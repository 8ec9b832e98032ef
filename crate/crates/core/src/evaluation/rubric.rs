//! The five-level clinician rubric.

/// Score and label for each rubric row, lowest first.
pub const RUBRIC: [(u8, &str); 5] = [
    (0, "No answer"),
    (1, "Wrong answer"),
    (2, "Partially correct answer"),
    (3, "Correct answer with wrong reasoning"),
    (4, "Correct answer with correct reasoning"),
];

/// Label for a score, or `None` when the score is outside `0..=4`.
pub fn rubric_label(score: i64) -> Option<&'static str> {
    RUBRIC
        .iter()
        .find(|(s, _)| i64::from(*s) == score)
        .map(|(_, label)| *label)
}

pub fn score_for_label(label: &str) -> Option<u8> {
    RUBRIC.iter().find(|(_, l)| *l == label).map(|(s, _)| *s)
}
