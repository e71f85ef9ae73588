/// A decoded token sequence with its score.
///
/// CTC hypotheses carry bare vocabulary tokens; attention-decoder hypotheses
/// start with the start-of-sentence token and, when `complete`, end with the
/// end-of-sentence token.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_score: f64,
    pub normalized_score: f64,
    pub complete: bool,
}

impl Hypothesis {
    /// Tokens without sentence delimiters.
    pub fn text_tokens(&self) -> Vec<usize> {
        crate::vocab::strip_delimiters(&self.tokens)
    }
}
