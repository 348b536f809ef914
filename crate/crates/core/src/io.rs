//! Plain-text output helpers shared by the pipelines and the CLI.

/// Round-trippable float formatting: 17 significant digits in scientific notation.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}
